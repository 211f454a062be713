//! Noise distributions `p_y` for (V)NCE.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::special_math::{normal_sf, tail_moments, LN_2PI};

/// A noise density with exact marginals over any subset of coordinates.
pub trait NoiseModel: Sync {
    fn dim(&self) -> usize;
    /// Log-density of the coordinates flagged in `mask`; other entries of `y`
    /// are ignored.
    fn log_marginal(&self, mask: &[bool], y: &[f64]) -> f64;
    fn log_density(&self, y: &[f64]) -> f64 {
        self.log_marginal(&vec![true; self.dim()], y)
    }
    /// Fills `out` with one draw of the full vector.
    fn sample_into(&self, rng: &mut crate::rng::Rng, out: &mut [f64]);
}

// ---- Gaussian --------------------------------------------------------------

/// Multivariate Gaussian noise, either fitted to data or fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussSpec", into = "GaussSpec")]
pub struct EmpiricalGaussNoise {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct GaussSpec {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussSpec> for EmpiricalGaussNoise {
    type Error = Error;
    fn try_from(s: GaussSpec) -> Result<Self> {
        let d = s.mean.len();
        if s.cov.len() != d || s.cov.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: s.cov.len() });
        }
        let cov = DMatrix::from_fn(d, d, |i, j| s.cov[i][j]);
        EmpiricalGaussNoise::new(DVector::from_vec(s.mean), cov)
    }
}

impl From<EmpiricalGaussNoise> for GaussSpec {
    fn from(n: EmpiricalGaussNoise) -> Self {
        let d = n.mean.len();
        GaussSpec {
            mean: n.mean.iter().copied().collect(),
            cov: (0..d).map(|i| (0..d).map(|j| n.cov[(i, j)]).collect()).collect(),
        }
    }
}

impl EmpiricalGaussNoise {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
        }
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| {
                Error::NotPositiveDefinite("noise covariance is singular (constant or collinear columns?)".into())
            })?
            .l();
        Ok(Self { mean, cov, chol })
    }

    /// `N(0, var * I_d)`, e.g. the deliberately poor `N(0, 30 I)` noise.
    pub fn isotropic(d: usize, var: f64) -> Result<Self> {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d) * var)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// Gaussian with the sample mean and (unbiased) sample covariance of `data`.
pub fn gaussian_noise_from_data(data: &MaskedDataset) -> Result<EmpiricalGaussNoise> {
    let (n, d) = (data.n_rows(), data.dim());
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 rows to fit a Gaussian, got {n}")));
    }
    if !data.is_complete() {
        return Err(Error::Domain("Gaussian noise fit needs fully observed data".into()));
    }
    let mut mean = DVector::zeros(d);
    for r in data.rows() {
        mean += DVector::from_column_slice(r.values);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in data.rows() {
        let c = DVector::from_column_slice(r.values) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    EmpiricalGaussNoise::new(mean, cov)
}

impl NoiseModel for EmpiricalGaussNoise {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_marginal(&self, mask: &[bool], y: &[f64]) -> f64 {
        let idx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if idx.is_empty() {
            return 0.0;
        }
        let k = idx.len();
        let (l, r) = if k == self.dim() {
            (self.chol.clone(), DVector::from_column_slice(y) - &self.mean)
        } else {
            let sub = DMatrix::from_fn(k, k, |a, b| self.cov[(idx[a], idx[b])]);
            let l = nalgebra::Cholesky::new(sub).expect("principal block of a PD matrix").l();
            (l, DVector::from_iterator(k, idx.iter().map(|&i| y[i] - self.mean[i])))
        };
        let w = l.solve_lower_triangular(&r).expect("nonsingular factor");
        let logdet: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * w.norm_squared() - logdet - 0.5 * k as f64 * LN_2PI
    }

    fn sample_into(&self, rng: &mut crate::rng::Rng, out: &mut [f64]) {
        let eps = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| StandardNormal.sample(rng)));
        let y = &self.mean + &self.chol * eps;
        out.copy_from_slice(y.as_slice());
    }
}

// ---- Factorised truncated normal --------------------------------------------

/// Product over coordinates of `N(mu_i, sigma_i^2)` truncated to `[0, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorisedTruncNormNoise {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

const FIT_MAX_ITERS: usize = 100;
const FIT_TOL: f64 = 1e-10;

/// Pre-truncation `(mu, sigma)` whose `[0, inf)` truncation has the given
/// mean and variance.
///
/// The truncated mean over the standard deviation depends only on the
/// standardised truncation point `alpha`, and decreases from `inf` to `1` as
/// `alpha` grows. So the two moment equations reduce to one monotone equation
/// in `alpha`, solved by Newton's method with a bisection safeguard. The
/// scale then follows in closed form.
pub fn fit_truncnorm_moments(mean: f64, var: f64) -> Result<(f64, f64)> {
    if !(mean > 0.0) || !(var > 0.0) || !mean.is_finite() || !var.is_finite() {
        return Err(Error::Domain(format!("need positive finite mean and variance, got ({mean}, {var})")));
    }
    let sd = var.sqrt();
    let target = mean / sd;
    if target <= 1.0 {
        return Err(Error::NoConvergence { iterations: 0, residual: 1.0 - target });
    }
    let ln_target = target.ln();
    // g(alpha) = log shift - log sqrt(v) - log target, decreasing in alpha
    let eval = |alpha: f64| {
        let (mills, shift, v) = tail_moments(alpha);
        let g = shift.ln() - 0.5 * v.ln() - ln_target;
        let dv = mills * (v - shift * shift);
        let dg = -v / shift - 0.5 * dv / v;
        (g, dg)
    };
    // bracket around the naive (untruncated) guess
    let mut alpha = -target;
    let (mut lo, mut hi) = (alpha - 1.0, alpha + 1.0);
    while eval(lo).0 < 0.0 {
        lo = 2.0 * lo - hi;
    }
    while eval(hi).0 > 0.0 {
        hi = 2.0 * hi - lo;
        if hi > 1e8 {
            return Err(Error::NoConvergence { iterations: 0, residual: eval(hi).0 });
        }
    }
    let mut residual = f64::INFINITY;
    for it in 0..FIT_MAX_ITERS {
        let (g, dg) = eval(alpha);
        residual = g.abs();
        if residual <= FIT_TOL * 1e-2 || hi - lo <= 1e-15 * alpha.abs().max(1.0) {
            let (_, shift, v) = tail_moments(alpha);
            let sigma = sd / v.sqrt();
            let fit_res = ((sigma * shift - mean) / mean).abs();
            if fit_res > FIT_TOL {
                return Err(Error::NoConvergence { iterations: it, residual: fit_res });
            }
            return Ok((-alpha * sigma, sigma));
        }
        if g > 0.0 {
            lo = alpha;
        } else {
            hi = alpha;
        }
        let step = alpha - g / dg;
        alpha = if dg < 0.0 && step > lo && step < hi { step } else { 0.5 * (lo + hi) };
    }
    Err(Error::NoConvergence { iterations: FIT_MAX_ITERS, residual })
}

/// Per-column moment-matched truncated normals from the observed cells.
pub fn fit_factorised_truncnorm(data: &MaskedDataset) -> Result<FactorisedTruncNormNoise> {
    let cols = column_moments(data)?;
    let fits = cols.into_iter().map(|(m, v)| fit_truncnorm_moments(m, v)).collect::<Result<Vec<_>>>()?;
    Ok(FactorisedTruncNormNoise { mu: fits.iter().map(|f| f.0).collect(), sigma: fits.iter().map(|f| f.1).collect() })
}

/// Largest standardised truncation point used when a column's coefficient of
/// variation is at or above one, which no truncated normal can match.
pub const FIT_ALPHA_CAP: f64 = 50.0;

/// As [`fit_factorised_truncnorm`], but columns with `mean <= std` get the
/// truncated normal at `alpha = FIT_ALPHA_CAP` with the column mean (close to
/// an exponential) instead of an error. Returns the indices of such columns.
pub fn fit_factorised_truncnorm_lenient(data: &MaskedDataset) -> Result<(FactorisedTruncNormNoise, Vec<usize>)> {
    let cols = column_moments(data)?;
    let mut mu = Vec::with_capacity(cols.len());
    let mut sigma = Vec::with_capacity(cols.len());
    let mut capped = Vec::new();
    for (j, (m, v)) in cols.into_iter().enumerate() {
        match fit_truncnorm_moments(m, v) {
            Ok((a, b)) => {
                mu.push(a);
                sigma.push(b);
            }
            Err(Error::NoConvergence { .. }) if m <= v.sqrt() => {
                let (_, shift, _) = tail_moments(FIT_ALPHA_CAP);
                let s = m / shift;
                mu.push(-FIT_ALPHA_CAP * s);
                sigma.push(s);
                capped.push(j);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((FactorisedTruncNormNoise { mu, sigma }, capped))
}

fn column_moments(data: &MaskedDataset) -> Result<Vec<(f64, f64)>> {
    (0..data.dim())
        .map(|j| {
            let col = data.column_observed(j);
            if col.len() < 2 {
                return Err(Error::Domain(format!("column {j} has fewer than 2 observed values")));
            }
            if let Some(v) = col.iter().find(|v| **v < 0.0) {
                return Err(Error::Domain(format!("column {j} has a negative value {v}")));
            }
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            Ok((m, v))
        })
        .collect()
}

/// Log-density at `y >= 0` of `N(mu, sigma^2)` truncated to `[0, inf)`.
pub fn truncnorm_log_pdf(y: f64, mu: f64, sigma: f64) -> f64 {
    if y < 0.0 {
        return f64::NEG_INFINITY;
    }
    let t = (y - mu) / sigma;
    -0.5 * t * t - 0.5 * LN_2PI - sigma.ln() - normal_sf(-mu / sigma).ln()
}

/// Sum of the per-coordinate truncated-normal log-densities over the
/// coordinates flagged in `mask`; `y_obs` lists those values in order.
pub fn noise_log_marginal(noise: &FactorisedTruncNormNoise, mask: &[bool], y_obs: &[f64]) -> Result<f64> {
    if mask.len() != noise.mu.len() {
        return Err(Error::DimensionMismatch { expected: noise.mu.len(), got: mask.len() });
    }
    let k = mask.iter().filter(|&&m| m).count();
    if y_obs.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: y_obs.len() });
    }
    let idx = (0..mask.len()).filter(|&i| mask[i]);
    Ok(idx.zip(y_obs).map(|(i, &y)| truncnorm_log_pdf(y, noise.mu[i], noise.sigma[i])).sum())
}

/// Survival mass below which rejection from the untruncated normal is
/// abandoned for inversion.
const REJECTION_MIN_ACCEPT: f64 = 0.01;

/// One draw from a unit normal truncated to `[alpha, inf)`.
///
/// Rejection when the acceptance rate is at least 1%; otherwise inversion of
/// the survival function; and for `alpha` so far in the tail that the survival
/// mass underflows, exponential-proposal rejection (exact, acceptance near 1).
pub fn sample_unit_truncnorm<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let tail = normal_sf(alpha);
    if tail >= REJECTION_MIN_ACCEPT {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= alpha {
                return z;
            }
        }
    }
    if tail > 1e-300 {
        let u: f64 = rng.random::<f64>();
        let p = (1.0 - u) * tail;
        let z = std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
        return z.max(alpha);
    }
    let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let z = alpha + e / lambda;
        let u: f64 = rng.random::<f64>();
        if u <= (-0.5 * (z - lambda).powi(2)).exp() {
            return z;
        }
    }
}

impl FactorisedTruncNormNoise {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: sigma.len() });
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Domain(format!("truncated-normal scale must be positive, got {s}")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let n: Self = serde_json::from_str(s)?;
        Self::new(n.mu, n.sigma)
    }
}

impl NoiseModel for FactorisedTruncNormNoise {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn log_marginal(&self, mask: &[bool], y: &[f64]) -> f64 {
        (0..mask.len()).filter(|&i| mask[i]).map(|i| truncnorm_log_pdf(y[i], self.mu[i], self.sigma[i])).sum()
    }

    fn sample_into(&self, rng: &mut crate::rng::Rng, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (mu, s) = (self.mu[i], self.sigma[i]);
            *o = (mu + s * sample_unit_truncnorm(-mu / s, rng)).max(0.0);
        }
    }
}

/// `nu` noise rows per data row, each carrying that row's missingness mask.
/// Row `i`'s copies occupy rows `i*nu .. (i+1)*nu`.
pub fn sample_noise_matched<N: NoiseModel>(
    noise: &N,
    data: &MaskedDataset,
    nu: usize,
    rng: &mut crate::rng::Rng,
) -> Result<MaskedDataset> {
    if nu == 0 {
        return Err(Error::Config("noise ratio must be a positive integer".into()));
    }
    if data.dim() != noise.dim() {
        return Err(Error::DimensionMismatch { expected: noise.dim(), got: data.dim() });
    }
    let d = data.dim();
    let m = data.n_rows() * nu;
    let mut values = vec![0.0; m * d];
    let mut mask = Vec::with_capacity(m * d);
    for (i, row) in data.rows().enumerate() {
        for k in 0..nu {
            let r = (i * nu + k) * d;
            noise.sample_into(rng, &mut values[r..r + d]);
            mask.extend_from_slice(row.mask);
        }
    }
    MaskedDataset::with_mask(m, d, values, mask)
}

/// Complete i.i.d. noise sample of `m` rows.
pub fn sample_noise<N: NoiseModel>(noise: &N, m: usize, rng: &mut crate::rng::Rng) -> Result<MaskedDataset> {
    let d = noise.dim();
    let mut values = vec![0.0; m * d];
    for r in values.chunks_mut(d.max(1)) {
        noise.sample_into(rng, r);
    }
    MaskedDataset::complete(m, d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::special_math::trunc_normal_moments;
    use approx::assert_relative_eq;

    #[test]
    fn constant_column_is_rejected() {
        let ds = MaskedDataset::from_rows(&[vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 5.0]]).unwrap();
        match gaussian_noise_from_data(&ds) {
            Err(Error::NotPositiveDefinite(msg)) => assert!(msg.contains("singular")),
            other => panic!("expected a singular-covariance error, got {other:?}"),
        }
        assert!(gaussian_noise_from_data(&MaskedDataset::from_rows(&[vec![1.0]]).unwrap()).is_err());
    }

    #[test]
    fn fitted_gaussian_recovers_covariance() {
        let truth = EmpiricalGaussNoise::isotropic(2, 30.0).unwrap();
        let mut rng = rng_from(3, &[]);
        let n = 100_000;
        let ds = sample_noise(&truth, n, &mut rng).unwrap();
        let fit = gaussian_noise_from_data(&ds).unwrap();
        // var(s^2) = 2 sigma^4 / (n-1); var(s_12) ~ sigma^4 / n
        let se_diag = (2.0 * 900.0 / n as f64).sqrt();
        let se_off = (900.0 / n as f64).sqrt();
        assert!((fit.cov()[(0, 0)] - 30.0).abs() < 4.0 * se_diag);
        assert!((fit.cov()[(1, 1)] - 30.0).abs() < 4.0 * se_diag);
        assert!(fit.cov()[(0, 1)].abs() < 4.0 * se_off);
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let g = EmpiricalGaussNoise::new(
            DVector::from_vec(vec![0.5, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.7]),
        )
        .unwrap();
        let (n, lim) = (600, 8.0);
        let h = 2.0 * lim / n as f64;
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..n {
                let y = [-lim + (i as f64 + 0.5) * h, -lim + (j as f64 + 0.5) * h];
                mass += g.log_density(&y).exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-3, "{mass}");
        // marginal over one coordinate is the univariate normal
        let y = [0.9, f64::NAN];
        let expect = -0.5 * (0.4f64).powi(2) / 1.0 - 0.5 * LN_2PI;
        assert_relative_eq!(g.log_marginal(&[true, false], &y), expect, max_relative = 1e-14);
    }

    #[test]
    fn gaussian_json_round_trip() {
        let g = EmpiricalGaussNoise::isotropic(3, 30.0).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: EmpiricalGaussNoise = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn fit_round_trip_fixed_example() {
        let r = trunc_normal_moments(0.5, 1.0).unwrap();
        let (mu, s) = fit_truncnorm_moments(r.mu_bar, r.sigma2_bar).unwrap();
        assert!((mu - 0.5).abs() < 1e-6 && (s - 1.0).abs() < 1e-6, "({mu}, {s})");
    }

    #[test]
    fn fit_far_from_boundary_is_the_sample_moments() {
        let (mu, s) = fit_truncnorm_moments(50.0, 1.0).unwrap();
        assert!((mu - 50.0).abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fit_half_normal_column() {
        let (mu, s) = fit_truncnorm_moments(0.797_884_560_802_865_4, 0.363_380_227_632_418_6).unwrap();
        assert!(mu.abs() < 1e-5 && (s - 1.0).abs() < 1e-5, "({mu}, {s})");
    }

    #[test]
    fn fit_rejects_infeasible_and_negative() {
        assert!(matches!(fit_truncnorm_moments(1.0, 1.5), Err(Error::NoConvergence { .. })));
        let ds = MaskedDataset::from_rows(&[vec![1.0], vec![-0.1], vec![2.0]]).unwrap();
        assert!(matches!(fit_factorised_truncnorm(&ds), Err(Error::Domain(_))));
    }

    #[test]
    fn lenient_fit_caps_exponential_columns() {
        let ds = MaskedDataset::from_rows(&[vec![0.01], vec![0.02], vec![3.0], vec![0.05]]).unwrap();
        let (n, capped) = fit_factorised_truncnorm_lenient(&ds).unwrap();
        assert_eq!(capped, vec![0]);
        let col = ds.column_observed(0);
        let mean = col.iter().sum::<f64>() / 4.0;
        let r = trunc_normal_moments(n.mu[0], n.sigma[0]).unwrap();
        assert_relative_eq!(r.mu_bar, mean, max_relative = 1e-9);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]
        #[test]
        fn fit_inverts_forward_moments(mu in -3.0f64..3.0, sigma in 0.1f64..5.0) {
            let r = trunc_normal_moments(mu, sigma).unwrap();
            let (m, s) = fit_truncnorm_moments(r.mu_bar, r.sigma2_bar).unwrap();
            proptest::prop_assert!((m - mu).abs() <= 1e-6 * mu.abs().max(1.0), "mu {} vs {}", m, mu);
            proptest::prop_assert!((s - sigma).abs() <= 1e-6 * sigma.max(1.0), "sigma {} vs {}", s, sigma);
        }

        #[test]
        fn factorised_marginals_compose(seed in 0u64..1000) {
            let mut rng = rng_from(seed, &[]);
            let d = 4;
            let noise = FactorisedTruncNormNoise::new(
                (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                (0..d).map(|_| rng.random_range(0.2..3.0)).collect(),
            ).unwrap();
            let mut y = vec![0.0; d];
            noise.sample_into(&mut rng, &mut y);
            let a: Vec<bool> = (0..d).map(|_| rng.random::<bool>()).collect();
            let b: Vec<bool> = a.iter().map(|v| !v).collect();
            let sum = noise.log_marginal(&a, &y) + noise.log_marginal(&b, &y);
            proptest::prop_assert!((sum - noise.log_density(&y)).abs() <= 1e-12 * sum.abs().max(1.0));
            proptest::prop_assert!(y.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn half_normal_density_at_zero() {
        let n = FactorisedTruncNormNoise::new(vec![0.0], vec![1.0]).unwrap();
        let v = noise_log_marginal(&n, &[true], &[0.0]).unwrap();
        assert_relative_eq!(v, 0.797_884_560_802_865_4f64.ln(), max_relative = 1e-14);
        assert_eq!(noise_log_marginal(&n, &[false], &[]).unwrap(), 0.0);
        assert_eq!(noise_log_marginal(&n, &[true], &[-1.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn truncnorm_density_integrates_to_one() {
        for &(mu, s) in &[(0.0f64, 1.0f64), (2.0, 0.5), (-3.0, 1.0), (-20.0, 2.0)] {
            // substitution y = t^2 concentrates nodes near the boundary
            let n = 400_000;
            let hi = (mu + 40.0 * s).max(10.0 * s).sqrt();
            let h = hi / n as f64;
            let mass: f64 = (0..n)
                .map(|i| {
                    let t = (i as f64 + 0.5) * h;
                    truncnorm_log_pdf(t * t, mu, s).exp() * 2.0 * t * h
                })
                .sum();
            assert!((mass - 1.0).abs() < 1e-8, "({mu}, {s}): {mass}");
        }
    }

    #[test]
    fn sampler_matches_truncated_mean_in_every_regime() {
        // rejection, inversion and far-tail exponential regimes
        for &(mu, s) in &[(0.5, 1.0), (-4.0, 1.0), (-45.0, 1.0)] {
            let noise = FactorisedTruncNormNoise::new(vec![mu], vec![s]).unwrap();
            let mut rng = rng_from(9, &[]);
            let n = 100_000;
            let mut sum = 0.0;
            let mut y = [0.0];
            for _ in 0..n {
                noise.sample_into(&mut rng, &mut y);
                assert!(y[0] >= 0.0);
                sum += y[0];
            }
            let r = trunc_normal_moments(mu, s).unwrap();
            let se = (r.sigma2_bar / n as f64).sqrt();
            assert!((sum / n as f64 - r.mu_bar).abs() < 4.0 * se, "({mu}, {s})");
        }
    }

    #[test]
    fn matched_noise_preserves_masks() {
        let ds = MaskedDataset::with_mask(2, 3, vec![1.0; 6], vec![true, false, true, true, true, true]).unwrap();
        let noise = FactorisedTruncNormNoise::new(vec![1.0; 3], vec![1.0; 3]).unwrap();
        let y = sample_noise_matched(&noise, &ds, 10, &mut rng_from(0, &[])).unwrap();
        assert_eq!(y.n_rows(), 20);
        for i in 0..10 {
            assert_eq!(y.row(i).n_observed(), 2);
            assert!(y.row(i).values[1].is_nan());
            assert_eq!(y.row(10 + i).n_observed(), 3);
        }
        let full = MaskedDataset::from_rows(&vec![vec![1.0; 3]; 5]).unwrap();
        let y = sample_noise_matched(&noise, &full, 1, &mut rng_from(0, &[])).unwrap();
        assert_eq!(y.n_rows(), 5);
        assert!(y.is_complete());
    }
}
