//! Variational posteriors `q(z | x; alpha)`.
//!
//! Discrete families are evaluated by enumeration ([`DiscretePosterior`]).
//! Continuous families are reparametrised ([`ReparamFamily`]): a draw is
//! `z = T(eps; alpha, x)` with `eps ~ N(0, I)`, and gradients with respect to
//! `alpha` are pulled back through `T` and through `log q`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::models::{discrete_posterior, DiscreteLatentModel};
use crate::special_math::{sigmoid, softplus, LN_2PI};

/// `q(z | x)` over a finite latent space.
pub trait DiscretePosterior: Sync {
    fn n_params(&self) -> usize;
    fn log_q(&self, alpha: &[f64], x: &[f64], z: usize) -> f64;
    /// `grad += scale * d log q(z | x) / d alpha`.
    fn add_grad_log_q(&self, alpha: &[f64], x: &[f64], z: usize, scale: f64, grad: &mut [f64]);
}

/// Binary posterior `q(z=0 | x; w) = 1 / (1 + exp(w0 + w1 x + w2 x^2))`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogisticQuadratic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticQuadraticParams {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
}

impl LogisticQuadraticParams {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.w0, self.w1, self.w2]
    }

    /// Weights for which the family equals the normalised-mixture posterior.
    pub fn matching_mog_posterior(theta: f64, sigma1: f64) -> Self {
        Self {
            w0: (theta / sigma1).ln(),
            w1: 0.0,
            w2: -0.5 * (1.0 / (sigma1 * sigma1) - 1.0 / (theta * theta)),
        }
    }
}

/// `q(z = 0 | x)` for the logistic-quadratic family.
pub fn logistic_quadratic_q(x: f64, w: &LogisticQuadraticParams) -> f64 {
    sigmoid(-(w.w0 + w.w1 * x + w.w2 * x * x))
}

impl DiscretePosterior for LogisticQuadratic {
    fn n_params(&self) -> usize {
        3
    }
    fn log_q(&self, alpha: &[f64], x: &[f64], z: usize) -> f64 {
        let a = alpha[0] + alpha[1] * x[0] + alpha[2] * x[0] * x[0];
        if z == 0 {
            -softplus(a)
        } else {
            -softplus(-a)
        }
    }
    fn add_grad_log_q(&self, alpha: &[f64], x: &[f64], z: usize, scale: f64, grad: &mut [f64]) {
        let a = alpha[0] + alpha[1] * x[0] + alpha[2] * x[0] * x[0];
        let da = if z == 0 { -sigmoid(a) } else { sigmoid(-a) };
        let s = scale * da;
        grad[0] += s;
        grad[1] += s * x[0];
        grad[2] += s * x[0] * x[0];
    }
}

/// The true posterior of a discrete model at fixed `theta`; no parameters.
#[derive(Debug, Clone)]
pub struct ExactPosterior<'a, M> {
    pub model: &'a M,
    pub theta: Vec<f64>,
}

impl<M: DiscreteLatentModel> DiscretePosterior for ExactPosterior<'_, M> {
    fn n_params(&self) -> usize {
        0
    }
    fn log_q(&self, _alpha: &[f64], x: &[f64], z: usize) -> f64 {
        discrete_posterior(self.model, &self.theta, x)[z].ln()
    }
    fn add_grad_log_q(&self, _: &[f64], _: &[f64], _: usize, _: f64, _: &mut [f64]) {}
}

// ---------------------------------------------------------------------------
// Reparametrised continuous families
// ---------------------------------------------------------------------------

/// A reparametrised family, prepared once per `(alpha, dataset)`.
pub trait ReparamFamily: Sync {
    type Prepared<'a>: PreparedFamily
    where
        Self: 'a;

    fn n_params(&self) -> usize;
    fn prepare<'a>(&'a self, alpha: &[f64], data: &'a MaskedDataset) -> Result<Self::Prepared<'a>>;
}

/// Per-row sampling and pullback for a prepared family.
pub trait PreparedFamily: Sync {
    type Acc: Send;

    fn latent_dim(&self, row: usize) -> usize;
    /// Writes `z = T(eps)` and returns `log q(z | x_row)`.
    fn sample(&self, row: usize, eps: &[f64], z: &mut [f64]) -> f64;
    fn new_acc(&self) -> Self::Acc;
    /// Pulls back `sum_s g_z[s] . z_s + g_logq[s] * log q(z_s)` for the `S`
    /// draws of one row (flattened `S x k`).
    fn accumulate(&self, row: usize, eps: &[f64], z: &[f64], g_z: &[f64], g_logq: &[f64], acc: &mut Self::Acc);
    fn merge(&self, into: &mut Self::Acc, other: Self::Acc);
    fn finish(&self, acc: Self::Acc) -> Vec<f64>;
}

/// A single reparametrised draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub log_q: f64,
}

/// Draws `eps ~ N(0, I_k)` and pushes it through a family.
pub fn reparam_sample<P: PreparedFamily, R: Rng + ?Sized>(q: &P, row: usize, rng: &mut R) -> ReparamSample {
    let k = q.latent_dim(row);
    let eps: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    let mut z = vec![0.0; k];
    let log_q = q.sample(row, &eps, &mut z);
    ReparamSample { z, eps, log_q }
}

// ---- Mean-field Gaussian from a 2-layer tanh network ---------------------

/// `x (2) -> tanh(100) -> tanh(100) -> [mu (2), log sigma^2 (2)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldNN {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
}

/// Bounds on the log-variance output.
pub const LOG_VAR_CLAMP: f64 = 10.0;

impl Default for MeanFieldNN {
    fn default() -> Self {
        Self { input: 2, hidden: 100, latent: 2 }
    }
}

/// Views into the flat parameter vector.
struct NnLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

/// Forward activations of one input.
#[derive(Debug, Clone)]
pub struct NnActivations {
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    clamped: Vec<bool>,
}

impl NnActivations {
    pub fn sigma2(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }
}

impl MeanFieldNN {
    fn layout(&self) -> NnLayout {
        let (i, h, o) = (self.input, self.hidden, 2 * self.latent);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        NnLayout { w1, b1, w2, b2, w3, b3, end: b3 + o }
    }

    pub fn n_weights(&self) -> usize {
        self.layout().end
    }

    /// Weights drawn from `U(-0.05, 0.05)`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u = Uniform::new(-0.05, 0.05).expect("valid range");
        (0..self.n_weights()).map(|_| u.sample(rng)).collect()
    }

    pub fn forward(&self, alpha: &[f64], x: &[f64]) -> NnActivations {
        let l = self.layout();
        let (h, o) = (self.hidden, 2 * self.latent);
        let dense = |w: usize, b: usize, input: &[f64], out_dim: usize| -> Vec<f64> {
            (0..out_dim)
                .map(|r| {
                    let row = &alpha[w + r * input.len()..w + (r + 1) * input.len()];
                    alpha[b + r] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        };
        let h1: Vec<f64> = dense(l.w1, l.b1, x, h).into_iter().map(f64::tanh).collect();
        let h2: Vec<f64> = dense(l.w2, l.b2, &h1, h).into_iter().map(f64::tanh).collect();
        let out = dense(l.w3, l.b3, &h2, o);
        let mu = out[..self.latent].to_vec();
        let raw = &out[self.latent..];
        let clamped = raw.iter().map(|v| v.abs() > LOG_VAR_CLAMP).collect();
        let log_var = raw.iter().map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).collect();
        NnActivations { h1, h2, mu, log_var, clamped }
    }

    /// `(mu, sigma^2)` of `q(z | x)`.
    pub fn mean_field(&self, alpha: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = self.forward(alpha, x);
        let s2 = a.sigma2();
        (a.mu, s2)
    }

    /// Adds `d/d alpha` of `g_mu . mu + g_lv . log_var` into `grad`.
    pub fn backward(&self, alpha: &[f64], x: &[f64], act: &NnActivations, g_mu: &[f64], g_lv: &[f64], grad: &mut [f64]) {
        let l = self.layout();
        let (h, k) = (self.hidden, self.latent);
        let mut g_out = Vec::with_capacity(2 * k);
        g_out.extend_from_slice(g_mu);
        g_out.extend(g_lv.iter().zip(&act.clamped).map(|(g, &c)| if c { 0.0 } else { *g }));
        // layer 3
        let mut g_h2 = vec![0.0; h];
        for (r, &go) in g_out.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grad[l.b3 + r] += go;
            let w = l.w3 + r * h;
            for j in 0..h {
                grad[w + j] += go * act.h2[j];
                g_h2[j] += go * alpha[w + j];
            }
        }
        // layer 2
        let g_a2: Vec<f64> = g_h2.iter().zip(&act.h2).map(|(g, t)| g * (1.0 - t * t)).collect();
        let mut g_h1 = vec![0.0; h];
        for (r, &ga) in g_a2.iter().enumerate() {
            grad[l.b2 + r] += ga;
            let w = l.w2 + r * h;
            for j in 0..h {
                grad[w + j] += ga * act.h1[j];
                g_h1[j] += ga * alpha[w + j];
            }
        }
        // layer 1
        for r in 0..h {
            let ga = g_h1[r] * (1.0 - act.h1[r] * act.h1[r]);
            grad[l.b1 + r] += ga;
            let w = l.w1 + r * self.input;
            for (j, xj) in x.iter().enumerate() {
                grad[w + j] += ga * xj;
            }
        }
    }
}

/// `(mu, sigma^2)` from the network for input `x`.
pub fn nn_meanfield_forward(x: [f64; 2], net: &MeanFieldNN, alpha: &[f64]) -> ([f64; 2], [f64; 2]) {
    let (mu, s2) = net.mean_field(alpha, &x);
    ([mu[0], mu[1]], [s2[0], s2[1]])
}

/// Mean-field Gaussian `N(mu, diag sigma^2)` with a closed-form reparam.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl MeanFieldGaussian {
    pub fn sample_with(&self, eps: &[f64], z: &mut [f64]) -> f64 {
        let mut lq = 0.0;
        for i in 0..self.mu.len() {
            let sd = (0.5 * self.log_var[i]).exp();
            z[i] = self.mu[i] + sd * eps[i];
            lq += -0.5 * eps[i] * eps[i] - 0.5 * self.log_var[i] - 0.5 * LN_2PI;
        }
        lq
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        (0..self.mu.len())
            .map(|i| {
                let v = self.log_var[i].exp();
                -0.5 * (z[i] - self.mu[i]).powi(2) / v - 0.5 * self.log_var[i] - 0.5 * LN_2PI
            })
            .sum()
    }
}

/// [`MeanFieldNN`] over the rows of a dataset.
pub struct PreparedNN<'a> {
    net: &'a MeanFieldNN,
    alpha: Vec<f64>,
    data: &'a MaskedDataset,
    acts: Vec<NnActivations>,
}

impl ReparamFamily for MeanFieldNN {
    type Prepared<'a> = PreparedNN<'a>;

    fn n_params(&self) -> usize {
        self.n_weights()
    }

    fn prepare<'a>(&'a self, alpha: &[f64], data: &'a MaskedDataset) -> Result<PreparedNN<'a>> {
        if alpha.len() != self.n_weights() {
            return Err(Error::DimensionMismatch { expected: self.n_weights(), got: alpha.len() });
        }
        let acts = crate::par::map_indexed(data.n_rows(), |i| self.forward(alpha, data.row(i).values));
        Ok(PreparedNN { net: self, alpha: alpha.to_vec(), data, acts })
    }
}

impl PreparedFamily for PreparedNN<'_> {
    type Acc = Vec<f64>;

    fn latent_dim(&self, _row: usize) -> usize {
        self.net.latent
    }

    fn sample(&self, row: usize, eps: &[f64], z: &mut [f64]) -> f64 {
        let a = &self.acts[row];
        MeanFieldGaussian { mu: a.mu.clone(), log_var: a.log_var.clone() }.sample_with(eps, z)
    }

    fn new_acc(&self) -> Vec<f64> {
        vec![0.0; self.net.n_weights()]
    }

    fn accumulate(&self, row: usize, eps: &[f64], _z: &[f64], g_z: &[f64], g_logq: &[f64], acc: &mut Vec<f64>) {
        let k = self.net.latent;
        let a = &self.acts[row];
        let mut g_mu = vec![0.0; k];
        let mut g_lv = vec![0.0; k];
        for (s, &gl) in g_logq.iter().enumerate() {
            for i in 0..k {
                let gz = g_z[s * k + i];
                let sd = (0.5 * a.log_var[i]).exp();
                g_mu[i] += gz;
                g_lv[i] += gz * eps[s * k + i] * 0.5 * sd - 0.5 * gl;
            }
        }
        self.net.backward(&self.alpha, self.data.row(row).values, a, &g_mu, &g_lv, acc);
    }

    fn merge(&self, into: &mut Vec<f64>, other: Vec<f64>) {
        crate::par::add_assign(into, &other);
    }

    fn finish(&self, acc: Vec<f64>) -> Vec<f64> {
        acc
    }
}

// ---- Joint lognormal with closed-form conditionals ------------------------

/// Joint lognormal over all `d` coordinates; `log u ~ N(m, L L')`.
///
/// Parameter layout: `m` (d entries), then the lower triangle of `L` row by
/// row with each diagonal entry stored as its logarithm. With `diagonal`
/// set, only the `d` log-diagonal entries follow `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLognormal {
    pub d: usize,
    pub diagonal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLognormalParams {
    pub m: DVector<f64>,
    /// Lower-triangular factor with positive diagonal.
    pub l: DMatrix<f64>,
}

impl JointLognormalParams {
    pub fn cov(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Conditional of the joint lognormal over the missing coordinates, in log
/// space: `log z ~ N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLognormal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl ConditionalLognormal {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = cholesky_lower(&cov)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `z = exp(mean + C eps)`; returns `log q(z)` including the Jacobian
    /// `-sum log z`.
    pub fn sample_with(&self, eps: &[f64], z: &mut [f64]) -> f64 {
        lognormal_draw(&self.mean, &self.chol, eps, z)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        if z.iter().any(|&v| v <= 0.0) {
            return f64::NEG_INFINITY;
        }
        let k = self.dim();
        let w = DVector::from_iterator(k, z.iter().map(|v| v.ln()));
        let r = &w - &self.mean;
        let y = self.chol.solve_lower_triangular(&r).expect("nonsingular factor");
        let logdet: f64 = self.chol.diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * y.norm_squared() - logdet - 0.5 * k as f64 * LN_2PI - w.sum()
    }

    pub fn reparam_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ReparamSample {
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        let mut z = vec![0.0; self.dim()];
        let log_q = self.sample_with(&eps, &mut z);
        ReparamSample { z, eps, log_q }
    }
}

fn lognormal_draw(mean: &DVector<f64>, chol: &DMatrix<f64>, eps: &[f64], z: &mut [f64]) -> f64 {
    let k = mean.len();
    let mut lq = -0.5 * k as f64 * LN_2PI;
    for i in 0..k {
        let mut w = mean[i];
        for j in 0..=i {
            w += chol[(i, j)] * eps[j];
        }
        z[i] = w.exp();
        lq += -0.5 * eps[i] * eps[i] - chol[(i, i)].ln() - w;
    }
    lq
}

pub(crate) fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    nalgebra::Cholesky::new(a.clone())
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} matrix", a.nrows(), a.ncols())))
}

fn select(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

fn select_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn split_mask(mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let obs = (0..mask.len()).filter(|&i| mask[i]).collect();
    let mis = (0..mask.len()).filter(|&i| !mask[i]).collect();
    (obs, mis)
}

/// Exact conditional over the unobserved coordinates given the observed
/// ones. Observed values must be strictly positive.
pub fn lognormal_conditional(
    params: &JointLognormalParams,
    observed_mask: &[bool],
    observed_values: &[f64],
) -> Result<ConditionalLognormal> {
    let d = params.m.len();
    if observed_mask.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: observed_mask.len() });
    }
    let (obs, mis) = split_mask(observed_mask);
    if observed_values.len() != obs.len() {
        return Err(Error::DimensionMismatch { expected: obs.len(), got: observed_values.len() });
    }
    if let Some(v) = observed_values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("lognormal conditioning needs positive values, got {v}")));
    }
    let cache = MaskCache::new(&params.m, &params.cov(), obs, mis)?;
    let y = DVector::from_iterator(observed_values.len(), observed_values.iter().map(|v| v.ln()));
    let mean = cache.cond_mean(&params.m, &y);
    Ok(ConditionalLognormal { mean, cov: cache.cond_cov.clone(), chol: cache.chol.clone() })
}

/// Conditioning quantities shared by every row with one missingness pattern.
#[derive(Debug, Clone)]
struct MaskCache {
    obs: Vec<usize>,
    mis: Vec<usize>,
    /// `Sigma_OO^-1`
    b: DMatrix<f64>,
    /// `Sigma_MO Sigma_OO^-1`
    a: DMatrix<f64>,
    sigma_mo: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl MaskCache {
    fn new(_m: &DVector<f64>, sigma: &DMatrix<f64>, obs: Vec<usize>, mis: Vec<usize>) -> Result<Self> {
        let s_mm = select(sigma, &mis, &mis);
        if obs.is_empty() {
            let chol = cholesky_lower(&s_mm)?;
            return Ok(Self {
                b: DMatrix::zeros(0, 0),
                a: DMatrix::zeros(mis.len(), 0),
                sigma_mo: DMatrix::zeros(mis.len(), 0),
                cond_cov: s_mm,
                chol,
                obs,
                mis,
            });
        }
        let s_oo = select(sigma, &obs, &obs);
        let s_mo = select(sigma, &mis, &obs);
        let b = nalgebra::Cholesky::new(s_oo)
            .ok_or_else(|| Error::NotPositiveDefinite("observed block of the lognormal covariance".into()))?
            .inverse();
        let a = &s_mo * &b;
        let mut cond = &s_mm - &a * s_mo.transpose();
        cond = (&cond + cond.transpose()) * 0.5;
        let chol = cholesky_lower(&cond)?;
        Ok(Self { b, a, sigma_mo: s_mo, cond_cov: cond, chol, obs, mis })
    }

    fn cond_mean(&self, m: &DVector<f64>, y_obs: &DVector<f64>) -> DVector<f64> {
        let m_m = select_vec(m, &self.mis);
        if self.obs.is_empty() {
            return m_m;
        }
        let r = y_obs - select_vec(m, &self.obs);
        m_m + &self.a * r
    }
}

/// Per-pattern gradient accumulators.
#[derive(Debug, Clone)]
pub struct MaskAcc {
    g_mean: DVector<f64>,
    g_mean_r: DMatrix<f64>,
    g_chol: DMatrix<f64>,
}

impl MaskAcc {
    fn new(k: usize, o: usize) -> Self {
        Self { g_mean: DVector::zeros(k), g_mean_r: DMatrix::zeros(k, o), g_chol: DMatrix::zeros(k, k) }
    }

    fn add(&mut self, other: &MaskAcc) {
        self.g_mean += &other.g_mean;
        self.g_mean_r += &other.g_mean_r;
        self.g_chol += &other.g_chol;
    }
}

/// [`JointLognormal`] conditioned on every row of a dataset, with one cache
/// per missingness pattern.
pub struct PreparedLognormal {
    family: JointLognormal,
    params: JointLognormalParams,
    caches: Vec<MaskCache>,
    /// Row -> cache index; `None` for complete rows.
    row_group: Vec<Option<usize>>,
    means: Vec<DVector<f64>>,
    resid: Vec<DVector<f64>>,
}

impl JointLognormal {
    pub fn n_cov_params(&self) -> usize {
        if self.diagonal {
            self.d
        } else {
            self.d * (self.d + 1) / 2
        }
    }

    pub fn unpack(&self, alpha: &[f64]) -> Result<JointLognormalParams> {
        let want = self.d + self.n_cov_params();
        if alpha.len() != want {
            return Err(Error::DimensionMismatch { expected: want, got: alpha.len() });
        }
        let m = DVector::from_column_slice(&alpha[..self.d]);
        let mut l = DMatrix::zeros(self.d, self.d);
        let mut idx = self.d;
        for i in 0..self.d {
            if self.diagonal {
                l[(i, i)] = alpha[idx].exp();
                idx += 1;
                continue;
            }
            for j in 0..=i {
                l[(i, j)] = if i == j { alpha[idx].exp() } else { alpha[idx] };
                idx += 1;
            }
        }
        Ok(JointLognormalParams { m, l })
    }

    pub fn pack(&self, p: &JointLognormalParams) -> Vec<f64> {
        let mut v: Vec<f64> = p.m.iter().copied().collect();
        for i in 0..self.d {
            if self.diagonal {
                v.push(p.l[(i, i)].ln());
                continue;
            }
            for j in 0..=i {
                v.push(if i == j { p.l[(i, i)].ln() } else { p.l[(i, j)] });
            }
        }
        v
    }

    /// Lognormal whose per-coordinate moments match those of `data`'s
    /// observed (positive) cells; an uncorrelated starting point.
    pub fn moment_init(&self, data: &MaskedDataset) -> Vec<f64> {
        let mut m = DVector::zeros(self.d);
        let mut l = DMatrix::zeros(self.d, self.d);
        for j in 0..self.d {
            let logs: Vec<f64> = data.column_observed(j).into_iter().filter(|v| *v > 0.0).map(f64::ln).collect();
            let (mu, var) = if logs.len() >= 2 {
                let mu = logs.iter().sum::<f64>() / logs.len() as f64;
                let var = logs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (logs.len() - 1) as f64;
                (mu, var.max(1e-4))
            } else {
                (0.0, 1.0)
            };
            m[j] = mu;
            l[(j, j)] = var.sqrt();
        }
        self.pack(&JointLognormalParams { m, l })
    }
}

impl ReparamFamily for JointLognormal {
    type Prepared<'a> = PreparedLognormal;

    fn n_params(&self) -> usize {
        self.d + self.n_cov_params()
    }

    fn prepare<'a>(&'a self, alpha: &[f64], data: &'a MaskedDataset) -> Result<PreparedLognormal> {
        if data.dim() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: data.dim() });
        }
        let params = self.unpack(alpha)?;
        let sigma = params.cov();
        let mut caches = Vec::new();
        let mut row_group = vec![None; data.n_rows()];
        let mut means = vec![DVector::zeros(0); data.n_rows()];
        let mut resid = vec![DVector::zeros(0); data.n_rows()];
        let groups: BTreeMap<Vec<bool>, Vec<usize>> = data.mask_groups();
        for (mask, rows) in groups {
            let (obs, mis) = split_mask(&mask);
            if mis.is_empty() {
                continue;
            }
            let cache = MaskCache::new(&params.m, &sigma, obs, mis)?;
            let g = caches.len();
            for &i in &rows {
                let row = data.row(i);
                let y = DVector::from_iterator(
                    cache.obs.len(),
                    cache.obs.iter().map(|&j| row.values[j].max(f64::MIN_POSITIVE).ln()),
                );
                let r = &y - select_vec(&params.m, &cache.obs);
                means[i] = cache.cond_mean(&params.m, &y);
                resid[i] = r;
                row_group[i] = Some(g);
            }
            caches.push(cache);
        }
        Ok(PreparedLognormal { family: *self, params, caches, row_group, means, resid })
    }
}

impl PreparedLognormal {
    pub fn conditional(&self, row: usize) -> Option<ConditionalLognormal> {
        let g = self.row_group[row]?;
        let c = &self.caches[g];
        Some(ConditionalLognormal { mean: self.means[row].clone(), cov: c.cond_cov.clone(), chol: c.chol.clone() })
    }
}

/// Reverse mode through `Sigma = C C'`: symmetric gradient wrt `Sigma` given
/// the (lower-triangular) gradient wrt `C`.
fn cholesky_backward(c: &DMatrix<f64>, g_c: &DMatrix<f64>) -> DMatrix<f64> {
    let k = c.nrows();
    let mut p = c.transpose() * g_c.lower_triangle();
    for i in 0..k {
        for j in i + 1..k {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // C^-T P C^-1
    let inv_c = c.clone().solve_lower_triangular(&DMatrix::identity(k, k)).expect("nonsingular factor");
    let g = inv_c.transpose() * p * inv_c;
    (&g + g.transpose()) * 0.5
}

impl PreparedFamily for PreparedLognormal {
    type Acc = Vec<Option<MaskAcc>>;

    fn latent_dim(&self, row: usize) -> usize {
        self.row_group[row].map_or(0, |g| self.caches[g].mis.len())
    }

    fn sample(&self, row: usize, eps: &[f64], z: &mut [f64]) -> f64 {
        match self.row_group[row] {
            None => 0.0,
            Some(g) => lognormal_draw(&self.means[row], &self.caches[g].chol, eps, z),
        }
    }

    fn new_acc(&self) -> Self::Acc {
        vec![None; self.caches.len()]
    }

    fn accumulate(&self, row: usize, eps: &[f64], z: &[f64], g_z: &[f64], g_logq: &[f64], acc: &mut Self::Acc) {
        let Some(g) = self.row_group[row] else { return };
        let cache = &self.caches[g];
        let k = cache.mis.len();
        let slot = acc[g].get_or_insert_with(|| MaskAcc::new(k, cache.obs.len()));
        let mut g_mean = DVector::zeros(k);
        for (s, &gl) in g_logq.iter().enumerate() {
            let e = &eps[s * k..(s + 1) * k];
            for i in 0..k {
                let gw = g_z[s * k + i] * z[s * k + i] - gl;
                g_mean[i] += gw;
                for j in 0..=i {
                    slot.g_chol[(i, j)] += gw * e[j];
                }
                slot.g_chol[(i, i)] -= gl / cache.chol[(i, i)];
            }
        }
        slot.g_mean += &g_mean;
        if !cache.obs.is_empty() {
            slot.g_mean_r += &g_mean * self.resid[row].transpose();
        }
    }

    fn merge(&self, into: &mut Self::Acc, other: Self::Acc) {
        for (a, b) in into.iter_mut().zip(other) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add(&y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }

    fn finish(&self, acc: Self::Acc) -> Vec<f64> {
        let d = self.family.d;
        let mut g_m = DVector::zeros(d);
        let mut g_sigma = DMatrix::zeros(d, d);
        for (cache, slot) in self.caches.iter().zip(acc) {
            let Some(slot) = slot else { continue };
            let (obs, mis) = (&cache.obs, &cache.mis);
            let g_s = cholesky_backward(&cache.chol, &slot.g_chol);
            for (a, &i) in mis.iter().enumerate() {
                g_m[i] += slot.g_mean[a];
                for (b, &j) in mis.iter().enumerate() {
                    g_sigma[(i, j)] += g_s[(a, b)];
                }
            }
            if obs.is_empty() {
                continue;
            }
            // mean = m_M + A r,  r = y - m_O,  A = Sigma_MO B
            let g_mo_neg = cache.a.transpose() * &slot.g_mean;
            for (a, &i) in obs.iter().enumerate() {
                g_m[i] -= g_mo_neg[a];
            }
            // mean reads A = S_MO B; cov = S_MM - S_MO B S_MO' reads S_MO
            // twice (g_s and B are symmetric) and B once.
            let gs_smo = &g_s * &cache.sigma_mo;
            let g_smo = (&slot.g_mean_r - &gs_smo * 2.0) * &cache.b;
            let g_b = cache.sigma_mo.transpose() * (&slot.g_mean_r - gs_smo);
            let g_soo = -(&cache.b * g_b * &cache.b);
            for (a, &i) in mis.iter().enumerate() {
                for (b, &j) in obs.iter().enumerate() {
                    g_sigma[(i, j)] += g_smo[(a, b)];
                }
            }
            for (a, &i) in obs.iter().enumerate() {
                for (b, &j) in obs.iter().enumerate() {
                    g_sigma[(i, j)] += g_soo[(a, b)];
                }
            }
        }
        let l = &self.params.l;
        let g_l = (&g_sigma + g_sigma.transpose()) * l;
        let mut out: Vec<f64> = g_m.iter().copied().collect();
        for i in 0..d {
            if self.family.diagonal {
                out.push(g_l[(i, i)] * l[(i, i)]);
                continue;
            }
            for j in 0..=i {
                out.push(if i == j { g_l[(i, i)] * l[(i, i)] } else { g_l[(i, j)] });
            }
        }
        out
    }
}

/// Continuous `q` of either shipped kind, for one conditioning context.
#[derive(Debug, Clone, PartialEq)]
pub enum ContinuousQ {
    Gaussian(MeanFieldGaussian),
    Lognormal(ConditionalLognormal),
}

impl ContinuousQ {
    pub fn dim(&self) -> usize {
        match self {
            ContinuousQ::Gaussian(g) => g.mu.len(),
            ContinuousQ::Lognormal(l) => l.dim(),
        }
    }

    pub fn sample_with(&self, eps: &[f64]) -> ReparamSample {
        let mut z = vec![0.0; self.dim()];
        let log_q = match self {
            ContinuousQ::Gaussian(g) => g.sample_with(eps, &mut z),
            ContinuousQ::Lognormal(l) => l.sample_with(eps, &mut z),
        };
        ReparamSample { z, eps: eps.to_vec(), log_q }
    }

    pub fn reparam_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ReparamSample {
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        self.sample_with(&eps)
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        match self {
            ContinuousQ::Gaussian(g) => g.log_density(z),
            ContinuousQ::Lognormal(l) => l.log_density(z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MogParams, NormalisedMog};
    use crate::rng::rng_from;
    use approx::assert_relative_eq;

    #[test]
    fn logistic_quadratic_basics() {
        let w = LogisticQuadraticParams { w0: 0.0, w1: 0.0, w2: 0.0 };
        for &x in &[-3.0, 0.0, 12.0] {
            assert_eq!(logistic_quadratic_q(x, &w), 0.5);
        }
        let w = LogisticQuadraticParams { w0: 0.3, w1: -0.2, w2: 1e-6 };
        for &x in &[-100.0, -10.0, 0.0, 100.0] {
            let q = logistic_quadratic_q(x, &w);
            assert!(q > 0.0 && q < 1.0);
        }
    }

    #[test]
    fn logistic_quadratic_contains_true_posterior() {
        let (theta, s1) = (4.0, 1.0);
        let w = LogisticQuadraticParams::matching_mog_posterior(theta, s1);
        let p = MogParams::new(theta, s1, 0.0).unwrap();
        for i in 0..41 {
            let x = -6.0 + 0.3 * i as f64;
            let q = logistic_quadratic_q(x, &w);
            assert!((q - crate::models::mog_exact_posterior(x, &p)).abs() < 1e-12);
        }
        let model = NormalisedMog { sigma1: s1 };
        let exact = ExactPosterior { model: &model, theta: vec![theta] };
        let lq = LogisticQuadratic;
        for &x in &[-2.0, 0.1, 3.3] {
            for z in 0..2 {
                assert!((exact.log_q(&[], &[x], z) - lq.log_q(&w.to_vec(), &[x], z)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logistic_quadratic_gradient() {
        let a = [0.2, -0.4, 0.1];
        let x = [1.3];
        for z in 0..2 {
            let mut g = [0.0; 3];
            LogisticQuadratic.add_grad_log_q(&a, &x, z, 1.0, &mut g);
            for i in 0..3 {
                let h = 1e-6;
                let mut p = a;
                let mut m = a;
                p[i] += h;
                m[i] -= h;
                let fd = (LogisticQuadratic.log_q(&p, &x, z) - LogisticQuadratic.log_q(&m, &x, z)) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_network_gives_standard_normal() {
        let net = MeanFieldNN::default();
        let alpha = vec![0.0; net.n_weights()];
        let (mu, s2) = nn_meanfield_forward([0.7, -2.0], &net, &alpha);
        assert_eq!(mu, [0.0, 0.0]);
        assert_eq!(s2, [1.0, 1.0]);
    }

    #[test]
    fn network_output_is_continuous_in_x() {
        let net = MeanFieldNN::default();
        let alpha = net.init(&mut rng_from(1, &[]));
        let (m0, s0) = nn_meanfield_forward([0.5, 0.5], &net, &alpha);
        let (m1, s1) = nn_meanfield_forward([0.5 + 1e-7, 0.5], &net, &alpha);
        for i in 0..2 {
            assert!((m0[i] - m1[i]).abs() < 1e-7);
            assert!((s0[i] - s1[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn network_log_q_gradient_matches_differences() {
        let net = MeanFieldNN { input: 2, hidden: 7, latent: 2 };
        let mut rng = rng_from(5, &[]);
        let alpha: Vec<f64> = (0..net.n_weights()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let x = [0.3, -0.9];
        let eps = [0.4, -1.2];
        let data = MaskedDataset::from_rows(&[x.to_vec()]).unwrap();
        let f = |a: &[f64]| {
            let p = net.prepare(a, &data).unwrap();
            let mut z = [0.0; 2];
            let lq = p.sample(0, &eps, &mut z);
            // arbitrary smooth functional of the draw
            lq + 0.7 * z[0] - 0.3 * z[1] * z[1]
        };
        let p = net.prepare(&alpha, &data).unwrap();
        let mut z = [0.0; 2];
        p.sample(0, &eps, &mut z);
        let mut acc = p.new_acc();
        p.accumulate(0, &eps, &z, &[0.7, -0.6 * z[1]], &[1.0], &mut acc);
        let g = p.finish(acc);
        for i in 0..alpha.len() {
            let h = 1e-6;
            let mut ap = alpha.clone();
            let mut am = alpha.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (f(&ap) - f(&am)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "weight {i}: {} vs {fd}", g[i]);
        }
    }

    fn random_lognormal(d: usize, seed: u64) -> (JointLognormal, Vec<f64>) {
        let fam = JointLognormal { d, diagonal: false };
        let mut rng = rng_from(seed, &[]);
        let alpha = (0..fam.n_params()).map(|_| rng.random_range(-0.6..0.6)).collect();
        (fam, alpha)
    }

    #[test]
    fn lognormal_pack_round_trip() {
        let (fam, alpha) = random_lognormal(4, 2);
        let p = fam.unpack(&alpha).unwrap();
        let back = fam.pack(&p);
        for (a, b) in alpha.iter().zip(&back) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn conditioning_on_nothing_is_the_joint() {
        let (fam, alpha) = random_lognormal(3, 3);
        let p = fam.unpack(&alpha).unwrap();
        let c = lognormal_conditional(&p, &[false; 3], &[]).unwrap();
        assert!((c.mean.clone() - &p.m).norm() < 1e-14);
        assert!((c.cov.clone() - p.cov()).norm() < 1e-14);
    }

    #[test]
    fn diagonal_factor_ignores_observations() {
        let fam = JointLognormal { d: 3, diagonal: true };
        let p = fam.unpack(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.4]).unwrap();
        let a = lognormal_conditional(&p, &[true, false, false], &[0.5]).unwrap();
        let b = lognormal_conditional(&p, &[true, false, false], &[9.0]).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_relative_eq!(a.mean[0], -0.2);
        assert_relative_eq!(a.cov[(1, 1)], 1.0f64.exp().powi(0) * (-0.4f64).exp().powi(2));
    }

    #[test]
    fn two_dim_conditioning_hand_formula() {
        let p = JointLognormalParams {
            m: DVector::from_vec(vec![0.2, -0.5]),
            l: DMatrix::from_row_slice(2, 2, &[0.8, 0.0, 0.6, 0.5]),
        };
        let s = p.cov();
        let x0: f64 = 1.7;
        let c = lognormal_conditional(&p, &[true, false], &[x0]).unwrap();
        let mean = -0.5 + s[(1, 0)] / s[(0, 0)] * (x0.ln() - 0.2);
        let var = s[(1, 1)] - s[(1, 0)] * s[(1, 0)] / s[(0, 0)];
        assert_relative_eq!(c.mean[0], mean, max_relative = 1e-14);
        assert_relative_eq!(c.cov[(0, 0)], var, max_relative = 1e-14);
        // the conditional density integrates to one on (0, inf)
        let n = 200_000;
        let (lo, hi): (f64, f64) = (1e-6f64.ln(), 60f64.ln());
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..n)
            .map(|i| {
                let t = lo + (i as f64 + 0.5) * h;
                let z = t.exp();
                c.log_density(&[z]).exp() * z * h
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-4, "{mass}");
    }

    #[test]
    fn conditioning_then_marginalising_commutes() {
        let (fam, alpha) = random_lognormal(3, 11);
        let p = fam.unpack(&alpha).unwrap();
        // condition on x0, then keep dim 1
        let c = lognormal_conditional(&p, &[true, false, false], &[0.9]).unwrap();
        // marginalise dim 2 first, then condition on x0
        let sub = JointLognormalParams {
            m: DVector::from_vec(vec![p.m[0], p.m[1]]),
            l: cholesky_lower(&select(&p.cov(), &[0, 1], &[0, 1])).unwrap(),
        };
        let c2 = lognormal_conditional(&sub, &[true, false], &[0.9]).unwrap();
        assert_relative_eq!(c.mean[0], c2.mean[0], max_relative = 1e-12);
        assert_relative_eq!(c.cov[(0, 0)], c2.cov[(0, 0)], max_relative = 1e-12);
    }

    #[test]
    fn nonpositive_observations_rejected() {
        let (fam, alpha) = random_lognormal(2, 1);
        let p = fam.unpack(&alpha).unwrap();
        assert!(lognormal_conditional(&p, &[true, false], &[0.0]).is_err());
        assert!(lognormal_conditional(&p, &[true, false], &[-1.0]).is_err());
    }

    #[test]
    fn reparam_draw_at_zero_noise_is_the_centre() {
        let (fam, alpha) = random_lognormal(3, 4);
        let p = fam.unpack(&alpha).unwrap();
        let c = lognormal_conditional(&p, &[true, false, false], &[1.2]).unwrap();
        let s = ContinuousQ::Lognormal(c.clone()).sample_with(&[0.0, 0.0]);
        assert_relative_eq!(s.z[0], c.mean[0].exp());
        assert_relative_eq!(s.log_q, c.log_density(&s.z), max_relative = 1e-12);
        let g = MeanFieldGaussian { mu: vec![0.3, -1.0], log_var: vec![0.2, -0.7] };
        let s = ContinuousQ::Gaussian(g.clone()).sample_with(&[0.0, 0.0]);
        assert_eq!(s.z, vec![0.3, -1.0]);
        assert_relative_eq!(s.log_q, g.log_density(&s.z), max_relative = 1e-12);
    }

    #[test]
    fn gaussian_sample_mean_within_four_se() {
        let g = ContinuousQ::Gaussian(MeanFieldGaussian { mu: vec![1.5, -0.5], log_var: vec![0.0, 1.0] });
        let mut rng = rng_from(17, &[]);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let s = g.reparam_sample(&mut rng);
            sum[0] += s.z[0];
            sum[1] += s.z[1];
            assert!(s.log_q.exp() > 0.0);
        }
        let se = [1.0 / (n as f64).sqrt(), 1f64.exp().sqrt() / (n as f64).sqrt()];
        assert!((sum[0] / n as f64 - 1.5).abs() < 4.0 * se[0]);
        assert!((sum[1] / n as f64 + 0.5).abs() < 4.0 * se[1]);
    }

    /// `sum_rows sum_s [a . z + b * log q]` for fixed eps, as a function of alpha.
    fn lognormal_functional(fam: &JointLognormal, alpha: &[f64], data: &MaskedDataset, eps: &[Vec<f64>]) -> f64 {
        let p = fam.prepare(alpha, data).unwrap();
        let mut total = 0.0;
        for i in 0..data.n_rows() {
            let k = p.latent_dim(i);
            let mut z = vec![0.0; k];
            let lq = p.sample(i, &eps[i][..k], &mut z);
            total += 0.37 * lq + z.iter().enumerate().map(|(j, v)| (j as f64 - 0.8) * v).sum::<f64>();
        }
        total
    }

    #[test]
    fn lognormal_pullback_matches_differences() {
        for &diagonal in &[false, true] {
            let d = 4;
            let fam = JointLognormal { d, diagonal };
            let mut rng = rng_from(21, &[diagonal as u64]);
            let alpha: Vec<f64> = (0..fam.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
            let masks: [[bool; 4]; 5] = [
                [true, false, true, false],
                [false, false, false, false],
                [true, true, true, false],
                [true, false, true, false],
                [true, true, true, true],
            ];
            let mut values = Vec::new();
            let mut mask = Vec::new();
            for m in &masks {
                for &b in m {
                    values.push(rng.random_range(0.2..2.0));
                    mask.push(b);
                }
            }
            let data = MaskedDataset::with_mask(masks.len(), d, values, mask).unwrap();
            let eps: Vec<Vec<f64>> = (0..masks.len())
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let p = fam.prepare(&alpha, &data).unwrap();
            let mut acc = p.new_acc();
            for i in 0..data.n_rows() {
                let k = p.latent_dim(i);
                let mut z = vec![0.0; k];
                p.sample(i, &eps[i][..k], &mut z);
                let gz: Vec<f64> = (0..k).map(|j| j as f64 - 0.8).collect();
                p.accumulate(i, &eps[i][..k], &z, &gz, &[0.37], &mut acc);
            }
            let g = p.finish(acc);
            for i in 0..alpha.len() {
                let h = 1e-6;
                let mut ap = alpha.clone();
                let mut am = alpha.clone();
                ap[i] += h;
                am[i] -= h;
                let fd = (lognormal_functional(&fam, &ap, &data, &eps) - lognormal_functional(&fam, &am, &data, &eps))
                    / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "diag={diagonal} param {i}: {} vs {fd}", g[i]);
            }
        }
    }
}
