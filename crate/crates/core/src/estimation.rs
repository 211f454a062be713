//! Optimisation drivers: BFGS, exact-posterior EM, variational EM and the
//! Monte Carlo maximum-likelihood baseline.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::models::{
    truncgauss_conditional, unpack_symmetric, ContinuousLatentModel, DiscreteLatentModel, MarginalModel, Marginalised,
};
use crate::noise::sample_unit_truncnorm;
use crate::objectives::{
    nce_objective, vnce_gradients_enumerated, vnce_gradients_reparam, vnce_objective_enumerated, Evaluation,
    LatentDraws, NceProblem,
};
use crate::rng::{derive_seed, rng_from};
use crate::special_math::log_sum_exp_raw;
use crate::variational::{DiscretePosterior, ExactPosterior, ReparamFamily};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimiserConfig {
    /// Iteration cap; in variational EM it counts theta and alpha iterations
    /// together.
    pub max_iters: usize,
    pub alternation_period: usize,
    pub restarts: usize,
    /// Stop when the largest gradient entry falls below this.
    pub tolerance: f64,
}

impl Default for OptimiserConfig {
    fn default() -> Self {
        Self { max_iters: 80, alternation_period: 5, restarts: 5, tolerance: 1e-6 }
    }
}

impl OptimiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.alternation_period == 0 || self.restarts == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config(format!("optimiser settings must all be positive: {self:?}")));
        }
        Ok(())
    }
}

// ---- BFGS ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    /// Objective after each accepted step, starting with the value at `x0`.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when backtracking found no ascent; `x` is then the best iterate.
    pub line_search_failed: bool,
    /// Final inverse-Hessian approximation (of `-f`), for warm starts.
    pub inv_hessian: DMatrix<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximises `f` with BFGS and a backtracking (Armijo) line search.
///
/// `f` returns the value and gradient. Trial points where `f` fails or is not
/// finite are treated as rejected steps. `h0`, if given, seeds the inverse
/// Hessian approximation.
pub fn quasi_newton_maximise<F>(
    mut f: F,
    x0: &[f64],
    max_iters: usize,
    tolerance: f64,
    h0: Option<DMatrix<f64>>,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("objective {fx} at the starting point")));
    }
    let mut x = x0.to_vec();
    let warm = h0.is_some();
    let mut h = h0.unwrap_or_else(|| DMatrix::identity(n, n));
    let mut scaled = warm;
    let mut trace = vec![fx];
    let result = |x: Vec<f64>, fx, g, trace, it, conv, fail, h| OptimResult {
        x,
        value: fx,
        grad: g,
        trace,
        iterations: it,
        converged: conv,
        line_search_failed: fail,
        inv_hessian: h,
    };
    if n == 0 {
        return Ok(result(x, fx, g, trace, 0, true, false, h));
    }
    for it in 0..max_iters {
        if inf_norm(&g) < tolerance {
            return Ok(result(x, fx, g, trace, it, true, false, h));
        }
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut p: Vec<f64> = (&h * &gv).iter().copied().collect();
        let mut slope = dot(&g, &p);
        if !(slope > 0.0) {
            h = DMatrix::identity(n, n);
            scaled = false;
            p = g.clone();
            slope = dot(&g, &p);
        }
        let mut t = if scaled { 1.0 } else { (1.0 / inf_norm(&g)).min(1.0) };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let xt: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            if let Ok((ft, gt)) = f(&xt) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft >= fx + ARMIJO_C1 * t * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            return Ok(result(x, fx, g, trace, it, false, true, h));
        };
        // curvature pair for -f
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(&gn).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let stalled = (fnew - fx).abs() <= 1e-15 * (1.0 + fx.abs()) && inf_norm(&s) <= 1e-15 * (1.0 + inf_norm(&x));
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / dot(&y, &y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let sv = nalgebra::DVector::from_vec(s);
            let yv = nalgebra::DVector::from_vec(y);
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &sv * yv.transpose() * rho;
            h = &a * &h * a.transpose() + &sv * sv.transpose() * rho;
        }
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);
        if stalled {
            return Ok(result(x, fx, g, trace, it + 1, true, false, h));
        }
    }
    let conv = inf_norm(&g) < tolerance;
    Ok(result(x, fx, g, trace, max_iters, conv, false, h))
}

// ---- Positivity by log-parametrisation -----------------------------------------

/// Presents a model in coordinates where flagged parameters are replaced by
/// their logarithm.
#[derive(Debug, Clone)]
pub struct LogParams<'a, M> {
    pub inner: &'a M,
    pub log_mask: Vec<bool>,
}

impl<'a, M> LogParams<'a, M> {
    pub fn new(inner: &'a M, log_mask: Vec<bool>) -> Self {
        Self { inner, log_mask }
    }

    pub fn to_natural(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.log_mask).map(|(v, &l)| if l { v.exp() } else { *v }).collect()
    }

    pub fn to_unconstrained(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.log_mask).map(|(v, &l)| if l { v.ln() } else { *v }).collect()
    }

    fn chain(&self, theta: &[f64], before: &[f64], grad: &mut [f64]) {
        for i in 0..grad.len() {
            if self.log_mask[i] {
                let delta = grad[i] - before[i];
                grad[i] = before[i] + delta * theta[i];
            }
        }
    }
}

impl<M: DiscreteLatentModel> DiscreteLatentModel for LogParams<'_, M> {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }
    fn log_phi(&self, u: &[f64], x: &[f64], z: usize) -> f64 {
        self.inner.log_phi(&self.to_natural(u), x, z)
    }
    fn add_grad_theta(&self, u: &[f64], x: &[f64], z: usize, scale: f64, grad: &mut [f64]) {
        let theta = self.to_natural(u);
        let before = grad.to_vec();
        self.inner.add_grad_theta(&theta, x, z, scale, grad);
        self.chain(&theta, &before, grad);
    }
}

impl<M: MarginalModel> MarginalModel for LogParams<'_, M> {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn log_phi_marginal(&self, u: &[f64], x: &[f64]) -> f64 {
        self.inner.log_phi_marginal(&self.to_natural(u), x)
    }
    fn add_grad_marginal(&self, u: &[f64], x: &[f64], scale: f64, grad: &mut [f64]) {
        let theta = self.to_natural(u);
        let before = grad.to_vec();
        self.inner.add_grad_marginal(&theta, x, scale, grad);
        self.chain(&theta, &before, grad);
    }
}

// ---- NCE maximisation -------------------------------------------------------------

/// Maximises the NCE objective of `model` (in its own coordinates) from `x0`.
pub fn nce_maximise<M: MarginalModel>(
    model: &M,
    x0: &[f64],
    prob: &NceProblem<'_>,
    max_iters: usize,
    tolerance: f64,
) -> Result<OptimResult> {
    quasi_newton_maximise(
        |u| {
            let e = crate::objectives::nce_gradient(model, u, prob)?;
            Ok((e.report.value, e.grad_theta))
        },
        x0,
        max_iters,
        tolerance,
        None,
    )
}

// ---- Exact-posterior EM -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTraceRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub j_nce: f64,
    /// `J_VNCE(theta_k, q_{k-1})`; equals `j_vnce_post_e` at `k = 0`.
    pub j_vnce_pre_e: f64,
    /// `J_VNCE(theta_k, q_k)` with `q_k` the posterior at `theta_k`.
    pub j_vnce_post_e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub rows: Vec<EmTraceRow>,
}

impl EmTrace {
    pub fn final_theta(&self) -> &[f64] {
        &self.rows.last().expect("trace has the starting row").theta
    }

    /// Largest decrease of `J_NCE` between consecutive iterations (0 if
    /// monotone).
    pub fn max_nce_decrease(&self) -> f64 {
        self.rows.windows(2).map(|w| (w[0].j_nce - w[1].j_nce).max(0.0)).fold(0.0, f64::max)
    }
}

/// EM for VNCE with the exact posterior as the E-step: each iteration sets
/// `q_k = p(z | x; theta_k)` and takes a quasi-Newton M-step on
/// `theta -> J_VNCE(theta, q_k)`. `model` works in its own coordinates
/// (wrap it in [`LogParams`] for positivity); the posterior is taken from
/// the same coordinates.
pub fn em_vnce_exact<M: DiscreteLatentModel>(
    model: &M,
    theta0: &[f64],
    prob: &NceProblem<'_>,
    iterations: usize,
    m_step: &OptimiserConfig,
) -> Result<EmTrace> {
    let nce = |t: &[f64]| nce_objective(&Marginalised(model), t, prob).map(|r| r.value);
    let vnce = |t: &[f64], q_theta: &[f64]| {
        let q = ExactPosterior { model, theta: q_theta.to_vec() };
        vnce_objective_enumerated(model, &q, t, &[], prob).map(|r| r.value)
    };
    let mut theta = theta0.to_vec();
    let j0 = nce(&theta)?;
    let post0 = vnce(&theta, &theta)?;
    let mut rows = vec![EmTraceRow { iteration: 0, theta: theta.clone(), j_nce: j0, j_vnce_pre_e: post0, j_vnce_post_e: post0 }];
    for k in 1..=iterations {
        let q = ExactPosterior { model, theta: theta.clone() };
        let res = quasi_newton_maximise(
            |t| {
                let e = vnce_gradients_enumerated(model, &q, t, &[], prob)?;
                Ok((e.report.value, e.grad_theta))
            },
            &theta,
            m_step.max_iters,
            m_step.tolerance,
            None,
        )?;
        let pre = res.value;
        theta = res.x;
        rows.push(EmTraceRow {
            iteration: k,
            theta: theta.clone(),
            j_nce: nce(&theta)?,
            j_vnce_pre_e: pre,
            j_vnce_post_e: vnce(&theta, &theta)?,
        });
    }
    Ok(EmTrace { rows })
}

// ---- Variational EM ----------------------------------------------------------------

/// A VNCE objective in `(theta, alpha)` with its random inputs.
pub trait VnceTarget: Sync {
    type Draws: Sync;
    fn n_theta(&self) -> usize;
    fn n_alpha(&self) -> usize;
    fn draws(&self, seed: u64) -> Self::Draws;
    fn evaluate(&self, theta: &[f64], alpha: &[f64], draws: &Self::Draws) -> Result<Evaluation>;
}

/// Discrete latents, expectations by enumeration.
pub struct EnumeratedTarget<'a, M, Q> {
    pub model: &'a M,
    pub q: &'a Q,
    pub prob: &'a NceProblem<'a>,
}

impl<M: DiscreteLatentModel, Q: DiscretePosterior> VnceTarget for EnumeratedTarget<'_, M, Q> {
    type Draws = ();
    fn n_theta(&self) -> usize {
        self.model.n_params()
    }
    fn n_alpha(&self) -> usize {
        self.q.n_params()
    }
    fn draws(&self, _seed: u64) {}
    fn evaluate(&self, theta: &[f64], alpha: &[f64], _: &()) -> Result<Evaluation> {
        vnce_gradients_enumerated(self.model, self.q, theta, alpha, self.prob)
    }
}

/// Continuous latents through a reparametrised family.
pub struct ReparamTarget<'a, M, F> {
    pub model: &'a M,
    pub family: &'a F,
    pub prob: &'a NceProblem<'a>,
}

impl<M: ContinuousLatentModel, F: ReparamFamily> VnceTarget for ReparamTarget<'_, M, F> {
    type Draws = LatentDraws;
    fn n_theta(&self) -> usize {
        self.model.n_params()
    }
    fn n_alpha(&self) -> usize {
        self.family.n_params()
    }
    fn draws(&self, seed: u64) -> LatentDraws {
        LatentDraws::for_model(self.prob, self.model, seed)
    }
    fn evaluate(&self, theta: &[f64], alpha: &[f64], draws: &LatentDraws) -> Result<Evaluation> {
        vnce_gradients_reparam(self.model, self.family, theta, alpha, self.prob, draws)
    }
}

/// When the latent base noise is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    /// Fresh draws for every theta or alpha block.
    #[default]
    PerBlock,
    /// One set of draws for the whole run.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Theta,
    Alpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VemTraceRow {
    /// Joint iteration count after this step.
    pub iteration: usize,
    pub block: usize,
    pub phase: Phase,
    pub j_vnce: f64,
    pub theta_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VemResult {
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub value: f64,
    pub trace: Vec<VemTraceRow>,
    pub line_search_failures: usize,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Alternates blocks of `cfg.alternation_period` BFGS iterations on `theta`
/// (alpha fixed) and on `alpha` (theta fixed), starting with theta, until
/// `cfg.max_iters` iterations have been spent in total.
pub fn variational_em<T: VnceTarget>(
    target: &T,
    theta0: &[f64],
    alpha0: &[f64],
    cfg: &OptimiserConfig,
    resample: ResamplePolicy,
    seed: u64,
) -> Result<VemResult> {
    cfg.validate()?;
    if theta0.len() != target.n_theta() || alpha0.len() != target.n_alpha() {
        return Err(Error::DimensionMismatch { expected: target.n_theta() + target.n_alpha(), got: theta0.len() + alpha0.len() });
    }
    let mut theta = theta0.to_vec();
    let mut alpha = alpha0.to_vec();
    let mut h_theta: Option<DMatrix<f64>> = None;
    let mut h_alpha: Option<DMatrix<f64>> = None;
    let mut trace = Vec::new();
    let mut used = 0;
    let mut block = 0;
    let mut idle_blocks = 0;
    let mut failures = 0;
    let mut draws = target.draws(derive_seed(seed, &[0]));
    let mut value = f64::NAN;
    while used < cfg.max_iters && idle_blocks < 2 {
        if resample == ResamplePolicy::PerBlock && block > 0 {
            draws = target.draws(derive_seed(seed, &[block as u64]));
        }
        let phase = if block % 2 == 0 { Phase::Theta } else { Phase::Alpha };
        let budget = cfg.alternation_period.min(cfg.max_iters - used);
        let res = match phase {
            Phase::Theta => {
                let a = alpha.clone();
                quasi_newton_maximise(
                    |t| target.evaluate(t, &a, &draws).map(|e| (e.report.value, e.grad_theta)),
                    &theta,
                    budget,
                    cfg.tolerance,
                    h_theta.take(),
                )?
            }
            Phase::Alpha => {
                let t = theta.clone();
                quasi_newton_maximise(
                    |a| target.evaluate(&t, a, &draws).map(|e| (e.report.value, e.grad_alpha)),
                    &alpha,
                    budget,
                    cfg.tolerance,
                    h_alpha.take(),
                )?
            }
        };
        failures += res.line_search_failed as usize;
        idle_blocks = if res.iterations == 0 { idle_blocks + 1 } else { 0 };
        let start = used;
        used += res.iterations.max(1).min(budget);
        for (i, v) in res.trace.iter().enumerate().skip(1) {
            trace.push(VemTraceRow { iteration: start + i, block, phase, j_vnce: *v, theta_norm: f64::NAN });
        }
        value = res.value;
        match phase {
            Phase::Theta => {
                theta = res.x;
                h_theta = Some(res.inv_hessian);
            }
            Phase::Alpha => {
                alpha = res.x;
                h_alpha = Some(res.inv_hessian);
            }
        }
        let tn = l2(&theta);
        for row in trace.iter_mut().rev().take_while(|r| r.block == block) {
            row.theta_norm = tn;
        }
        block += 1;
    }
    Ok(VemResult { theta, alpha, value, trace, line_search_failures: failures })
}

/// Runs `run(r)` for `r = 0..restarts` (in parallel when enabled) and keeps
/// the highest-scoring success; ties go to the lowest index.
pub fn best_of_restarts<T, F>(restarts: usize, run: F) -> Result<(T, f64, usize)>
where
    T: Send,
    F: Fn(usize) -> Result<(T, f64)> + Sync + Send,
{
    let results = crate::par::map_indexed(restarts, &run);
    let mut best: Option<(T, f64, usize)> = None;
    let mut last_err = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((t, v)) if v.is_finite() => {
                if best.as_ref().is_none_or(|b| v > b.1) {
                    best = Some((t, v, i));
                }
            }
            Ok(_) => log::warn!("restart {i} ended at a non-finite objective"),
            Err(e) => {
                log::warn!("restart {i} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::NonFinite("every restart failed".into())))
}

// ---- Maximum likelihood for the unnormalised mixture ---------------------------------

/// Mean log-likelihood of the normalised unnormalised-mixture family
/// `p(x) = [N(x; 0, theta^2) theta + N(x; 0, s1^2) s1] / (theta + s1)` and
/// its derivative in `log theta`.
fn mog_loglik(xs: &[f64], sigma1: f64, log_theta: f64) -> (f64, f64) {
    let t = log_theta.exp();
    let mut v = 0.0;
    let mut g = 0.0;
    for &x in xs {
        let a = -0.5 * x * x / (t * t);
        let b = -0.5 * x * x / (sigma1 * sigma1);
        let l = log_sum_exp_raw(&[a, b]);
        v += l;
        // d a / d log t = x^2 / t^2
        g += (a - l).exp() * x * x / (t * t);
    }
    let n = xs.len() as f64;
    let ln_z = 0.5 * crate::special_math::LN_2PI + (t + sigma1).ln();
    (v / n - ln_z, g / n - t / (t + sigma1))
}

/// Maximum-likelihood `theta` of the normalised unnormalised-mixture family,
/// with the mean log-likelihood there.
pub fn mle_unnormalised_mog(xs: &[f64], sigma1: f64, theta0: f64) -> Result<(f64, f64)> {
    let r = quasi_newton_maximise(
        |u| {
            let (v, g) = mog_loglik(xs, sigma1, u[0]);
            Ok((v, vec![g]))
        },
        &[theta0.ln()],
        200,
        1e-10,
        None,
    )?;
    Ok((r.x[0].exp(), r.value))
}

// ---- MC-MLE for the truncated Gaussian ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMleConfig {
    pub epochs: usize,
    pub minibatch: usize,
    /// No default: gradient ascent is sensitive to it.
    pub step_size: f64,
    pub latent_samples: usize,
    pub seed: u64,
    /// Eigenvalue floor of the projection onto positive definite matrices.
    pub eig_floor: f64,
}

impl McMleConfig {
    pub fn new(step_size: f64, seed: u64) -> Self {
        Self { epochs: 80, minibatch: 100, step_size, latent_samples: 5, seed, eig_floor: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMleTraceRow {
    pub epoch: usize,
    pub step: usize,
    pub grad_norm: f64,
    pub k_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McMleResult {
    pub k: DMatrix<f64>,
    pub trace: Vec<McMleTraceRow>,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

/// Symmetrises and clips the eigenvalues of `k` at `floor`.
pub fn project_pd(k: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lam = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose()
}

fn add_suff_stats(u: &[f64], scale: f64, grad: &mut [f64]) {
    let d = u.len();
    let mut idx = 0;
    for i in 0..d {
        grad[idx] -= scale * 0.5 * u[i] * u[i];
        idx += 1;
        for j in i + 1..d {
            grad[idx] -= scale * u[i] * u[j];
            idx += 1;
        }
    }
}

fn pack_upper(k: &DMatrix<f64>) -> Vec<f64> {
    let d = k.nrows();
    let mut v = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            v.push(k[(i, j)]);
        }
    }
    v
}

fn gibbs_step(k: &DMatrix<f64>, u: &mut [f64], free: &[usize], rng: &mut crate::rng::Rng) -> Result<()> {
    for &i in free {
        let (mu, s) = truncgauss_conditional(k, i, u)?;
        let v = mu + s * sample_unit_truncnorm(-mu / s, rng);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("Gibbs state diverged at coordinate {i}")));
        }
        u[i] = v.max(0.0);
    }
    Ok(())
}

/// Stochastic gradient ascent on the log-likelihood of the truncated
/// Gaussian, with both expectations of the likelihood gradient estimated by
/// persistent Gibbs chains: one per data row over its missing cells, and
/// one over the full model.
pub fn mc_mle_sga(data: &MaskedDataset, k0: &DMatrix<f64>, cfg: &McMleConfig) -> Result<McMleResult> {
    if !(cfg.step_size > 0.0) || cfg.minibatch == 0 || cfg.latent_samples == 0 {
        return Err(Error::Config(format!("invalid MC-MLE settings: {cfg:?}")));
    }
    let (n, d) = (data.n_rows(), data.dim());
    let mut k = project_pd(k0, cfg.eig_floor);
    let mut rng = rng_from(cfg.seed, &[]);
    let imputed = data.mean_imputed()?;
    let mut chains: Vec<Vec<f64>> = (0..n).map(|i| imputed.row(i).values.to_vec()).collect();
    let missing: Vec<Vec<usize>> = (0..n).map(|i| (0..d).filter(|&j| !data.row(i).mask[j]).collect()).collect();
    let all: Vec<usize> = (0..d).collect();
    let mut model_chain = vec![1.0; d];
    let mut trace = Vec::new();
    let mut step = 0;
    let np = d * (d + 1) / 2;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(cfg.minibatch) {
            let mut grad = vec![0.0; np];
            let scale = 1.0 / (batch.len() * cfg.latent_samples) as f64;
            for &i in batch {
                for _ in 0..cfg.latent_samples {
                    if let Err(e) = gibbs_step(&k, &mut chains[i], &missing[i], &mut rng) {
                        return Ok(McMleResult { k, trace, aborted: Some(e.to_string()) });
                    }
                    add_suff_stats(&chains[i], scale, &mut grad);
                }
            }
            for _ in 0..batch.len() * cfg.latent_samples {
                if let Err(e) = gibbs_step(&k, &mut model_chain, &all, &mut rng) {
                    return Ok(McMleResult { k, trace, aborted: Some(e.to_string()) });
                }
                add_suff_stats(&model_chain, -scale, &mut grad);
            }
            let mut theta = pack_upper(&k);
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t += cfg.step_size * g;
            }
            k = project_pd(&unpack_symmetric(d, &theta), cfg.eig_floor);
            trace.push(McMleTraceRow { epoch, step, grad_norm: l2(&grad), k_norm: k.norm() });
            step += 1;
        }
    }
    Ok(McMleResult { k, trace, aborted: None })
}

// ---- Persistence ------------------------------------------------------------------------

/// One line of a persisted optimisation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub iteration: usize,
    pub j_nce: Option<f64>,
    pub j_vnce: Option<f64>,
    pub theta_norm: f64,
}

impl From<&EmTraceRow> for TraceCsvRow {
    fn from(r: &EmTraceRow) -> Self {
        Self { iteration: r.iteration, j_nce: Some(r.j_nce), j_vnce: Some(r.j_vnce_post_e), theta_norm: l2(&r.theta) }
    }
}

impl From<&VemTraceRow> for TraceCsvRow {
    fn from(r: &VemTraceRow) -> Self {
        Self { iteration: r.iteration, j_nce: None, j_vnce: Some(r.j_vnce), theta_norm: r.theta_norm }
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceCsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "j_nce", "j_vnce", "theta_norm"])?;
    let opt = |v: Option<f64>| v.map(crate::samplers::fmt_f64).unwrap_or_default();
    for r in rows {
        w.write_record([r.iteration.to_string(), opt(r.j_nce), opt(r.j_vnce), crate::samplers::fmt_f64(r.theta_norm)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_params_json(path: &Path, params: &crate::models::ParamsJson) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(params)?.as_bytes())?;
    Ok(())
}
