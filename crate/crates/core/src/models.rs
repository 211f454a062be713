//! Unnormalised latent-variable models.
//!
//! Parameters are flat `&[f64]` vectors so the same optimiser drives every
//! model. Layouts:
//!
//! * [`NormalisedMog`] takes `[theta]`
//! * [`UnnormalisedMog`] takes `[theta, c]`
//! * [`ToyModel`] has no parameters
//! * [`TruncGaussModel`] takes the upper triangle of `K` row by row (`K_00, K_01, ..,
//!   K_0(d-1), K_11, ..`), then `c`
//!
//! In the binary mixtures, latent state `0` is the free component (std
//! `theta`) and state `1` the fixed one (std `sigma1`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::RowView;
use crate::error::{Error, Result};
use crate::special_math::{log_sum_exp_raw, LN_2PI};

/// Model with a finite latent space, handled by exact enumeration.
pub trait DiscreteLatentModel: Sync {
    fn n_params(&self) -> usize;
    fn n_states(&self) -> usize;
    fn log_phi(&self, theta: &[f64], x: &[f64], z: usize) -> f64;
    /// `grad += scale * d log phi(x, z) / d theta`.
    fn add_grad_theta(&self, theta: &[f64], x: &[f64], z: usize, scale: f64, grad: &mut [f64]);
}

/// Model whose (latent-free) unnormalised density is tractable.
pub trait MarginalModel: Sync {
    fn n_params(&self) -> usize;
    fn log_phi_marginal(&self, theta: &[f64], x: &[f64]) -> f64;
    fn add_grad_marginal(&self, theta: &[f64], x: &[f64], scale: f64, grad: &mut [f64]);
}

/// Model with continuous latents reached through a reparametrised `q`.
pub trait ContinuousLatentModel: Sync {
    fn n_params(&self) -> usize;
    /// Number of latent coordinates attached to a row.
    fn latent_dim(&self, row: RowView<'_>) -> usize;
    fn log_phi(&self, theta: &[f64], row: RowView<'_>, z: &[f64]) -> f64;
    fn add_grad_theta(&self, theta: &[f64], row: RowView<'_>, z: &[f64], scale: f64, grad: &mut [f64]);
    /// `out = d log phi / dz`.
    fn grad_z(&self, theta: &[f64], row: RowView<'_>, z: &[f64], out: &mut [f64]);
}

/// Marginal of a discrete-latent model by summing over its states.
#[derive(Debug, Clone, Copy)]
pub struct Marginalised<'a, M>(pub &'a M);

impl<M: DiscreteLatentModel> MarginalModel for Marginalised<'_, M> {
    fn n_params(&self) -> usize {
        self.0.n_params()
    }

    fn log_phi_marginal(&self, theta: &[f64], x: &[f64]) -> f64 {
        let lp: Vec<f64> = (0..self.0.n_states()).map(|z| self.0.log_phi(theta, x, z)).collect();
        log_sum_exp_raw(&lp)
    }

    fn add_grad_marginal(&self, theta: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) {
        let lp: Vec<f64> = (0..self.0.n_states()).map(|z| self.0.log_phi(theta, x, z)).collect();
        let lse = log_sum_exp_raw(&lp);
        for (z, l) in lp.iter().enumerate() {
            let w = (l - lse).exp();
            if w > 0.0 {
                self.0.add_grad_theta(theta, x, z, scale * w, grad);
            }
        }
    }
}

/// Posterior `p(z | x; theta)` of a discrete model, by enumeration.
pub fn discrete_posterior<M: DiscreteLatentModel>(model: &M, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let lp: Vec<f64> = (0..model.n_states()).map(|z| model.log_phi(theta, x, z)).collect();
    let lse = log_sum_exp_raw(&lp);
    lp.iter().map(|l| (l - lse).exp()).collect()
}

// ---------------------------------------------------------------------------
// Mixtures of two zero-mean Gaussians
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MogParams {
    /// Std of the free component.
    pub theta: f64,
    /// Std of the fixed component.
    pub sigma1: f64,
    /// Log-scaling parameter (unnormalised variant only).
    pub c: f64,
}

impl MogParams {
    pub fn new(theta: f64, sigma1: f64, c: f64) -> Result<Self> {
        if !(theta > 0.0 && sigma1 > 0.0) {
            return Err(Error::Domain(format!("MoG stds must be positive, got ({theta}, {sigma1})")));
        }
        Ok(Self { theta, sigma1, c })
    }
}

fn log_normal_pdf(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.abs().ln() - 0.5 * x * x / (sd * sd)
}

/// `log p(x, z)` for the normalised mixture `z/2 N(0, s1^2) + (1-z)/2 N(0, theta^2)`.
pub fn mog_log_joint(x: f64, z: u8, p: &MogParams) -> f64 {
    let sd = if z == 1 { p.sigma1 } else { p.theta };
    -std::f64::consts::LN_2 + log_normal_pdf(x, sd)
}

/// `log phi(x, z)` for the unnormalised mixture with equal unnormalised
/// component weights and scale `exp(-c)`.
pub fn mog_unnorm_log_phi(x: f64, z: u8, p: &MogParams) -> f64 {
    let sd = if z == 1 { p.sigma1 } else { p.theta };
    -p.c - 0.5 * x * x / (sd * sd)
}

/// `p(z = 0 | x)` under the normalised mixture.
pub fn mog_exact_posterior(x: f64, p: &MogParams) -> f64 {
    let e = -0.5 * x * x * (1.0 / (p.sigma1 * p.sigma1) - 1.0 / (p.theta * p.theta));
    1.0 / (1.0 + p.theta / p.sigma1 * e.exp())
}

/// Normalised two-component mixture; parameter vector `[theta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalisedMog {
    pub sigma1: f64,
}

impl DiscreteLatentModel for NormalisedMog {
    fn n_params(&self) -> usize {
        1
    }
    fn n_states(&self) -> usize {
        2
    }
    fn log_phi(&self, theta: &[f64], x: &[f64], z: usize) -> f64 {
        let p = MogParams { theta: theta[0], sigma1: self.sigma1, c: 0.0 };
        mog_log_joint(x[0], z as u8, &p)
    }
    fn add_grad_theta(&self, theta: &[f64], x: &[f64], z: usize, scale: f64, grad: &mut [f64]) {
        if z == 0 {
            let t = theta[0];
            grad[0] += scale * (-1.0 / t + x[0] * x[0] / (t * t * t));
        }
    }
}

/// Unnormalised two-component mixture; parameter vector `[theta, c]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnnormalisedMog {
    pub sigma1: f64,
}

impl UnnormalisedMog {
    /// `c` that normalises the model for a given `theta`.
    pub fn log_partition(&self, theta: f64) -> f64 {
        (2.0 * std::f64::consts::PI).sqrt().ln() + (self.sigma1 + theta.abs()).ln()
    }
}

impl DiscreteLatentModel for UnnormalisedMog {
    fn n_params(&self) -> usize {
        2
    }
    fn n_states(&self) -> usize {
        2
    }
    fn log_phi(&self, theta: &[f64], x: &[f64], z: usize) -> f64 {
        let p = MogParams { theta: theta[0], sigma1: self.sigma1, c: theta[1] };
        mog_unnorm_log_phi(x[0], z as u8, &p)
    }
    fn add_grad_theta(&self, theta: &[f64], x: &[f64], z: usize, scale: f64, grad: &mut [f64]) {
        if z == 0 {
            let t = theta[0];
            grad[0] += scale * x[0] * x[0] / (t * t * t);
        }
        grad[1] -= scale;
    }
}

// ---------------------------------------------------------------------------
// 2D toy model: z ~ N(0, I), x | z ~ N((z1 z2, z1 z2), c^2 I)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub c: f64,
}

impl Default for ToyModelParams {
    fn default() -> Self {
        Self { c: 0.3 }
    }
}

/// `log N(z; 0, I) + log N(x; (z1 z2, z1 z2), 0.09 I)`.
pub fn toy_log_joint(x: [f64; 2], z: [f64; 2]) -> f64 {
    ToyModel::default().log_joint(x, z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ToyModel {
    pub params: ToyModelParams,
}

impl ToyModel {
    pub fn log_joint(&self, x: [f64; 2], z: [f64; 2]) -> f64 {
        let c2 = self.params.c * self.params.c;
        let m = z[0] * z[1];
        let prior = -LN_2PI - 0.5 * (z[0] * z[0] + z[1] * z[1]);
        let lik = -LN_2PI - c2.ln() - 0.5 * ((x[0] - m).powi(2) + (x[1] - m).powi(2)) / c2;
        prior + lik
    }

    /// Draws `(x, z)` from the joint.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ([f64; 2], [f64; 2]) {
        use rand_distr::{Distribution, StandardNormal};
        let z: [f64; 2] = [StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let m = z[0] * z[1];
        let e0: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        ([m + self.params.c * e0, m + self.params.c * e1], z)
    }
}

impl ContinuousLatentModel for ToyModel {
    fn n_params(&self) -> usize {
        0
    }
    fn latent_dim(&self, _row: RowView<'_>) -> usize {
        2
    }
    fn log_phi(&self, _theta: &[f64], row: RowView<'_>, z: &[f64]) -> f64 {
        self.log_joint([row.values[0], row.values[1]], [z[0], z[1]])
    }
    fn add_grad_theta(&self, _: &[f64], _: RowView<'_>, _: &[f64], _: f64, _: &mut [f64]) {}
    fn grad_z(&self, _theta: &[f64], row: RowView<'_>, z: &[f64], out: &mut [f64]) {
        let c2 = self.params.c * self.params.c;
        let m = z[0] * z[1];
        let r = (row.values[0] - m + row.values[1] - m) / c2;
        out[0] = -z[0] + z[1] * r;
        out[1] = -z[1] + z[0] * r;
    }
}

// ---------------------------------------------------------------------------
// Truncated Gaussian graphical model on the nonnegative orthant
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncGaussParams {
    /// Symmetric precision-like matrix.
    pub k: DMatrix<f64>,
    /// Log-scaling parameter.
    pub c: f64,
}

impl TruncGaussParams {
    pub fn new(k: DMatrix<f64>, c: f64) -> Result<Self> {
        if !k.is_square() {
            return Err(Error::Domain("K must be square".into()));
        }
        if (&k - k.transpose()).abs().max() > 1e-12 * k.abs().max().max(1.0) {
            return Err(Error::Domain("K must be symmetric".into()));
        }
        Ok(Self { k, c })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// Flat parameter vector in the [`TruncGaussModel`] layout.
    pub fn to_theta(&self) -> Vec<f64> {
        let d = self.dim();
        let mut v = Vec::with_capacity(d * (d + 1) / 2 + 1);
        for i in 0..d {
            for j in i..d {
                v.push(self.k[(i, j)]);
            }
        }
        v.push(self.c);
        v
    }

    pub fn from_theta(d: usize, theta: &[f64]) -> Result<Self> {
        let want = d * (d + 1) / 2 + 1;
        if theta.len() != want {
            return Err(Error::DimensionMismatch { expected: want, got: theta.len() });
        }
        Ok(Self { k: unpack_symmetric(d, theta), c: theta[want - 1] })
    }
}

/// Symmetric matrix from the leading `d(d+1)/2` entries of a flat vector.
pub fn unpack_symmetric(d: usize, theta: &[f64]) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            k[(i, j)] = theta[idx];
            k[(j, i)] = theta[idx];
            idx += 1;
        }
    }
    k
}

/// `log phi(u) = -u'Ku/2 - c` on `[0, inf)^d`, `-inf` outside. `u` is the
/// row with its missing cells filled from `z_missing` in column order.
pub fn truncgauss_log_phi(row: RowView<'_>, z_missing: &[f64], params: &TruncGaussParams) -> Result<f64> {
    let d = params.dim();
    if row.values.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: row.values.len() });
    }
    if z_missing.len() != row.n_missing() {
        return Err(Error::DimensionMismatch { expected: row.n_missing(), got: z_missing.len() });
    }
    let u = fill_row(row, z_missing);
    Ok(quad_log_phi(&params.k, params.c, &u))
}

fn fill_row(row: RowView<'_>, z: &[f64]) -> Vec<f64> {
    let mut zi = z.iter();
    row.values
        .iter()
        .zip(row.mask)
        .map(|(&v, &m)| if m { v } else { *zi.next().expect("latent length checked") })
        .collect()
}

fn quad_log_phi(k: &DMatrix<f64>, c: f64, u: &[f64]) -> f64 {
    if u.iter().any(|&v| v < 0.0) {
        return f64::NEG_INFINITY;
    }
    let d = u.len();
    let mut q = 0.0;
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += k[(i, j)] * u[j];
        }
        q += u[i] * s;
    }
    -0.5 * q - c
}

/// Pre-truncation conditional `N(mu, sigma^2)` of coordinate `i` given the
/// others under `exp(-u'Ku/2)`. Entry `i` of `u` is ignored.
pub fn truncgauss_conditional(k: &DMatrix<f64>, i: usize, u: &[f64]) -> Result<(f64, f64)> {
    let kii = k[(i, i)];
    if !(kii > 0.0) {
        return Err(Error::Domain(format!("K[{i},{i}] = {kii} must be positive")));
    }
    let s: f64 = (0..u.len()).filter(|&j| j != i).map(|j| k[(i, j)] * u[j]).sum();
    Ok((-s / kii, kii.sqrt().recip()))
}

/// Truncated Gaussian with missing cells as latents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncGaussModel {
    pub d: usize,
}

impl TruncGaussModel {
    pub fn n_k_params(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    fn add_grad_u(&self, u: &[f64], scale: f64, grad: &mut [f64]) {
        let mut idx = 0;
        for i in 0..self.d {
            grad[idx] -= scale * 0.5 * u[i] * u[i];
            idx += 1;
            for j in i + 1..self.d {
                grad[idx] -= scale * u[i] * u[j];
                idx += 1;
            }
        }
        grad[idx] -= scale;
    }
}

impl ContinuousLatentModel for TruncGaussModel {
    fn n_params(&self) -> usize {
        self.n_k_params() + 1
    }
    fn latent_dim(&self, row: RowView<'_>) -> usize {
        row.n_missing()
    }
    fn log_phi(&self, theta: &[f64], row: RowView<'_>, z: &[f64]) -> f64 {
        let k = unpack_symmetric(self.d, theta);
        quad_log_phi(&k, theta[self.n_k_params()], &fill_row(row, z))
    }
    fn add_grad_theta(&self, _theta: &[f64], row: RowView<'_>, z: &[f64], scale: f64, grad: &mut [f64]) {
        self.add_grad_u(&fill_row(row, z), scale, grad);
    }
    fn grad_z(&self, theta: &[f64], row: RowView<'_>, z: &[f64], out: &mut [f64]) {
        let k = unpack_symmetric(self.d, theta);
        let u = DVector::from_vec(fill_row(row, z));
        let ku = &k * &u;
        let mut o = out.iter_mut();
        for (i, &m) in row.mask.iter().enumerate() {
            if !m {
                *o.next().expect("latent length") = -ku[i];
            }
        }
    }
}

impl MarginalModel for TruncGaussModel {
    fn n_params(&self) -> usize {
        self.n_k_params() + 1
    }
    fn log_phi_marginal(&self, theta: &[f64], x: &[f64]) -> f64 {
        quad_log_phi(&unpack_symmetric(self.d, theta), theta[self.n_k_params()], x)
    }
    fn add_grad_marginal(&self, _theta: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) {
        self.add_grad_u(x, scale, grad);
    }
}

/// JSON form of a parameter vector: model parameters then the scaling `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

impl ParamsJson {
    /// Splits a flat vector whose last entry is `c` (when `has_c`).
    pub fn from_flat(flat: &[f64], has_c: bool) -> Self {
        if has_c {
            let (t, c) = flat.split_at(flat.len() - 1);
            Self { theta: t.to_vec(), c: Some(c[0]) }
        } else {
            Self { theta: flat.to_vec(), c: None }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.extend(self.c);
        v
    }
}
