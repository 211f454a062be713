//! NCE and VNCE objectives, their gradients, and the f-divergence gap.
//!
//! Everything is evaluated in the log domain. With `l = log phi - log(nu p_y)`
//! the classifier is `h = sigmoid(l)`, `log h = -softplus(-l)` and
//! `log(1 - h) = -softplus(l)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::models::{discrete_posterior, ContinuousLatentModel, DiscreteLatentModel, MarginalModel};
use crate::noise::NoiseModel;
use crate::par::{add_assign, map_chunks, map_indexed, CHUNK};
use crate::rng::rng_from;
use crate::special_math::{log_sum_exp_raw, sigmoid, softplus};
use crate::variational::{DiscretePosterior, PreparedFamily, ReparamFamily};

/// Log-probabilities below `ln(1e-300)` are clamped and flagged.
pub const LOG_FLOOR: f64 = -690.775_527_898_213_7;

/// Sample sizes of an (V)NCE problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NceConfig {
    pub nu: f64,
    pub n: usize,
    pub m: usize,
    pub latent_samples: usize,
}

impl NceConfig {
    pub fn new(n: usize, m: usize, latent_samples: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Config(format!("need data and noise rows, got n={n}, m={m}")));
        }
        if latent_samples == 0 {
            return Err(Error::Config("latent_samples must be at least 1".into()));
        }
        Ok(Self { nu: m as f64 / n as f64, n, m, latent_samples })
    }
}

/// Value of an objective with its pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub value: f64,
    /// `(1/n) sum_i` of the data-row terms.
    pub data_term: f64,
    /// `(1/m) sum_j` of the noise-row terms; `value = data_term + nu * noise_term`.
    pub noise_term: f64,
    /// Classifier probabilities, data rows then noise rows.
    pub h_values: Vec<f64>,
    pub data_row_terms: Vec<f64>,
    pub noise_row_terms: Vec<f64>,
    pub seed: Option<u64>,
    pub latent_samples: usize,
    /// Whether any log-probability hit [`LOG_FLOOR`].
    pub clamped: bool,
}

/// An objective value with gradients (empty when not requested).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ObjectiveReport,
    pub grad_theta: Vec<f64>,
    pub grad_alpha: Vec<f64>,
}

/// Data, noise and the noise log-densities `log(nu p_y)` of every row over
/// its observed coordinates.
#[derive(Debug, Clone)]
pub struct NceProblem<'a> {
    pub data: &'a MaskedDataset,
    pub noise: &'a MaskedDataset,
    pub cfg: NceConfig,
    log_nu_py_data: Vec<f64>,
    log_nu_py_noise: Vec<f64>,
}

impl<'a> NceProblem<'a> {
    pub fn new<N: NoiseModel>(
        data: &'a MaskedDataset,
        noise: &'a MaskedDataset,
        noise_model: &N,
        latent_samples: usize,
    ) -> Result<Self> {
        let nu = noise.n_rows() as f64 / data.n_rows().max(1) as f64;
        Self::with_nu(data, noise, noise_model, latent_samples, nu)
    }

    /// Like [`NceProblem::new`] but with an explicit `nu`, so that the noise
    /// rows can be a minibatch of a larger noise sample.
    pub fn with_nu<N: NoiseModel>(
        data: &'a MaskedDataset,
        noise: &'a MaskedDataset,
        noise_model: &N,
        latent_samples: usize,
        nu: f64,
    ) -> Result<Self> {
        if data.dim() != noise.dim() || data.dim() != noise_model.dim() {
            return Err(Error::DimensionMismatch { expected: data.dim(), got: noise.dim() });
        }
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::Config(format!("noise ratio must be positive, got {nu}")));
        }
        let cfg = NceConfig { nu, ..NceConfig::new(data.n_rows(), noise.n_rows(), latent_samples)? };
        let ln_nu = cfg.nu.ln();
        let lp = |ds: &MaskedDataset| {
            map_indexed(ds.n_rows(), |i| {
                let r = ds.row(i);
                ln_nu + noise_model.log_marginal(r.mask, r.values)
            })
        };
        Ok(Self { data, noise, cfg, log_nu_py_data: lp(data), log_nu_py_noise: lp(noise) })
    }

    pub fn log_nu_py_data(&self) -> &[f64] {
        &self.log_nu_py_data
    }

    pub fn log_nu_py_noise(&self) -> &[f64] {
        &self.log_nu_py_noise
    }
}

fn check_log_phi(v: f64, what: &str, row: usize) -> Result<f64> {
    if v.is_nan() || v == f64::INFINITY {
        return Err(Error::NonFinite(format!("log phi = {v} on {what} row {row}")));
    }
    Ok(v)
}

/// Clamps a log term at [`LOG_FLOOR`]. The second value is the term's
/// derivative factor: 0 once clamped, since the term is then constant.
fn floor(v: f64, clamped: &mut bool) -> (f64, f64) {
    if v < LOG_FLOOR {
        *clamped = true;
        (LOG_FLOOR, 0.0)
    } else {
        (v, 1.0)
    }
}

/// Per-chunk partial result.
struct Part<A> {
    sum: f64,
    terms: Vec<f64>,
    h: Vec<f64>,
    grad_theta: Vec<f64>,
    acc: A,
    clamped: bool,
}

impl<A> Part<A> {
    fn new(n_theta: usize, acc: A) -> Self {
        Self { sum: 0.0, terms: Vec::new(), h: Vec::new(), grad_theta: vec![0.0; n_theta], acc, clamped: false }
    }
}

/// Runs `row` over `0..n` in fixed chunks and merges the parts in order.
fn reduce_rows<A: Send, F>(
    n: usize,
    n_theta: usize,
    new_acc: impl Fn() -> A + Sync + Send,
    mut merge_acc: impl FnMut(&mut A, A),
    row: F,
) -> Result<Part<A>>
where
    F: Fn(usize, &mut Part<A>) -> Result<()> + Sync + Send,
{
    let parts = map_chunks(n, CHUNK, |range| {
        let mut p = Part::new(n_theta, new_acc());
        for i in range {
            row(i, &mut p)?;
        }
        Ok::<_, Error>(p)
    });
    let mut total = Part::new(n_theta, new_acc());
    for p in parts {
        let p: Part<A> = p?;
        total.sum += p.sum;
        total.terms.extend(p.terms);
        total.h.extend(p.h);
        add_assign(&mut total.grad_theta, &p.grad_theta);
        total.clamped |= p.clamped;
        merge_acc(&mut total.acc, p.acc);
    }
    Ok(total)
}

/// Assembles the report and returns `(report, grad_theta, acc_data, acc_noise)`.
fn finish_report<A, B>(
    prob: &NceProblem<'_>,
    d: Part<A>,
    y: Part<B>,
    seed: Option<u64>,
) -> (ObjectiveReport, Vec<f64>, A, B) {
    let cfg = prob.cfg;
    let data_term = d.sum / cfg.n as f64;
    let noise_term = y.sum / cfg.m as f64;
    let mut h = d.h;
    h.extend(y.h);
    let report = ObjectiveReport {
        value: data_term + cfg.nu * noise_term,
        data_term,
        noise_term,
        h_values: h,
        data_row_terms: d.terms,
        noise_row_terms: y.terms,
        seed,
        latent_samples: cfg.latent_samples,
        clamped: d.clamped || y.clamped,
    };
    let mut grad_theta = d.grad_theta;
    add_assign(&mut grad_theta, &y.grad_theta);
    (report, grad_theta, d.acc, y.acc)
}

// ---- NCE --------------------------------------------------------------------

/// Sample NCE objective of a model with a tractable `phi(x)`. Rows must be
/// fully observed.
pub fn nce_objective<M: MarginalModel>(model: &M, theta: &[f64], prob: &NceProblem<'_>) -> Result<ObjectiveReport> {
    nce_eval(model, theta, prob, false).map(|e| e.report)
}

/// NCE value and its gradient with respect to `theta`.
pub fn nce_gradient<M: MarginalModel>(model: &M, theta: &[f64], prob: &NceProblem<'_>) -> Result<Evaluation> {
    nce_eval(model, theta, prob, true)
}

fn nce_eval<M: MarginalModel>(model: &M, theta: &[f64], prob: &NceProblem<'_>, grad: bool) -> Result<Evaluation> {
    if !prob.data.is_complete() || !prob.noise.is_complete() {
        return Err(Error::Domain("NCE needs fully observed data and noise".into()));
    }
    let np = model.n_params();
    let (n, m, nu) = (prob.cfg.n as f64, prob.cfg.m as f64, prob.cfg.nu);
    let d = reduce_rows(prob.data.n_rows(), np, || (), |_, _| {}, |i, p| {
        let x = prob.data.row(i).values;
        let l = check_log_phi(model.log_phi_marginal(theta, x), "data", i)? - prob.log_nu_py_data[i];
        let (t, live) = floor(-softplus(-l), &mut p.clamped);
        p.sum += t;
        p.terms.push(t);
        p.h.push(sigmoid(l));
        if grad {
            model.add_grad_marginal(theta, x, live * sigmoid(-l) / n, &mut p.grad_theta);
        }
        Ok(())
    })?;
    let y = reduce_rows(prob.noise.n_rows(), np, || (), |_, _| {}, |j, p| {
        let x = prob.noise.row(j).values;
        let l = check_log_phi(model.log_phi_marginal(theta, x), "noise", j)? - prob.log_nu_py_noise[j];
        let (t, live) = floor(-softplus(l), &mut p.clamped);
        p.sum += t;
        p.terms.push(t);
        p.h.push(sigmoid(l));
        if grad {
            model.add_grad_marginal(theta, x, -live * nu * sigmoid(l) / m, &mut p.grad_theta);
        }
        Ok(())
    })?;
    let (report, gt, (), ()) = finish_report(prob, d, y, None);
    Ok(Evaluation { report, grad_theta: if grad { gt } else { Vec::new() }, grad_alpha: Vec::new() })
}

// ---- VNCE with enumerated discrete latents ----------------------------------

/// VNCE objective of a discrete-latent model with the latent expectations
/// computed exactly by enumeration.
pub fn vnce_objective_enumerated<M: DiscreteLatentModel, Q: DiscretePosterior>(
    model: &M,
    q: &Q,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
) -> Result<ObjectiveReport> {
    vnce_enum_eval(model, q, theta, alpha, prob, false).map(|e| e.report)
}

/// [`vnce_objective_enumerated`] with gradients in `theta` and `alpha`.
pub fn vnce_gradients_enumerated<M: DiscreteLatentModel, Q: DiscretePosterior>(
    model: &M,
    q: &Q,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
) -> Result<Evaluation> {
    vnce_enum_eval(model, q, theta, alpha, prob, true)
}

fn vnce_enum_eval<M: DiscreteLatentModel, Q: DiscretePosterior>(
    model: &M,
    q: &Q,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
    grad: bool,
) -> Result<Evaluation> {
    let np = model.n_params();
    let na = q.n_params();
    let (n, m, nu) = (prob.cfg.n as f64, prob.cfg.m as f64, prob.cfg.nu);
    let k = model.n_states();
    let d = reduce_rows(prob.data.n_rows(), np, || vec![0.0; na], |a, b| add_assign(a, &b), |i, p| {
        let x = prob.data.row(i).values;
        let (mut t, mut h) = (0.0, 0.0);
        for z in 0..k {
            let lq = q.log_q(alpha, x, z);
            let qz = lq.exp();
            if qz == 0.0 {
                continue;
            }
            let l = check_log_phi(model.log_phi(theta, x, z), "data", i)? - lq - prob.log_nu_py_data[i];
            let (f, live) = floor(-softplus(-l), &mut p.clamped);
            t += qz * f;
            h += qz * sigmoid(l);
            if grad {
                let s = live * sigmoid(-l);
                model.add_grad_theta(theta, x, z, qz * s / n, &mut p.grad_theta);
                q.add_grad_log_q(alpha, x, z, qz * (f - s) / n, &mut p.acc);
            }
        }
        p.sum += t;
        p.terms.push(t);
        p.h.push(h);
        Ok(())
    })?;
    let y = reduce_rows(prob.noise.n_rows(), np, || (), |_, _| {}, |j, p| {
        let x = prob.noise.row(j).values;
        // importance weights phi/q under q itself; with every state enumerated
        // the estimate of phi(y) is exact
        let mut lw = Vec::with_capacity(k);
        let mut states = Vec::with_capacity(k);
        for z in 0..k {
            let lq = q.log_q(alpha, x, z);
            if lq == f64::NEG_INFINITY {
                continue;
            }
            let lphi = check_log_phi(model.log_phi(theta, x, z), "noise", j)?;
            lw.push(lq + (lphi - lq));
            states.push(z);
        }
        let lr = log_sum_exp_raw(&lw);
        let big_l = lr - prob.log_nu_py_noise[j];
        let (t, live) = floor(-softplus(big_l), &mut p.clamped);
        p.sum += t;
        p.terms.push(t);
        p.h.push(sigmoid(big_l));
        if grad {
            let c = -live * nu * sigmoid(big_l) / m;
            for (w, &z) in lw.iter().zip(&states) {
                model.add_grad_theta(theta, x, z, c * (w - lr).exp(), &mut p.grad_theta);
            }
        }
        Ok(())
    })?;
    let (report, gt, grad_alpha, ()) = finish_report(prob, d, y, None);
    Ok(if grad {
        Evaluation { report, grad_theta: gt, grad_alpha }
    } else {
        Evaluation { report, grad_theta: Vec::new(), grad_alpha: Vec::new() }
    })
}

/// `log phi(y, z) - log q(z | y)` for every state: the log importance ratios
/// whose spread is the variance of the noise-term estimator.
pub fn importance_log_ratios<M: DiscreteLatentModel, Q: DiscretePosterior>(
    model: &M,
    q: &Q,
    theta: &[f64],
    alpha: &[f64],
    y: &[f64],
) -> Vec<f64> {
    (0..model.n_states()).map(|z| model.log_phi(theta, y, z) - q.log_q(alpha, y, z)).collect()
}

// ---- VNCE with reparametrised continuous latents ----------------------------

/// Base noise `eps ~ N(0, I)` for every latent draw, fixed by a seed so that
/// value and gradient evaluations share the same draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraws {
    pub seed: u64,
    pub samples: usize,
    data: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

impl LatentDraws {
    /// Row `i` of the data gets the stream `(seed, 0, i)`, row `j` of the
    /// noise `(seed, 1, j)`; `latent_dim` gives each row's latent count.
    pub fn new<F>(prob: &NceProblem<'_>, latent_dim: F, seed: u64) -> Self
    where
        F: Fn(crate::dataset::RowView<'_>) -> usize + Sync,
    {
        let s = prob.cfg.latent_samples;
        let gen = |ds: &MaskedDataset, tag: u64| {
            map_indexed(ds.n_rows(), |i| {
                let k = latent_dim(ds.row(i));
                let mut rng = rng_from(seed, &[tag, i as u64]);
                (0..s * k).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
            })
        };
        Self { seed, samples: s, data: gen(prob.data, 0), noise: gen(prob.noise, 1) }
    }

    pub fn for_model<M: ContinuousLatentModel>(prob: &NceProblem<'_>, model: &M, seed: u64) -> Self {
        Self::new(prob, |r| model.latent_dim(r), seed)
    }
}

/// Monte Carlo VNCE objective with reparametrised draws from `family`.
pub fn vnce_objective_reparam<M: ContinuousLatentModel, F: ReparamFamily>(
    model: &M,
    family: &F,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
    draws: &LatentDraws,
) -> Result<ObjectiveReport> {
    vnce_reparam_eval(model, family, theta, alpha, prob, draws, false).map(|e| e.report)
}

/// [`vnce_objective_reparam`] with pathwise gradients in `theta` and `alpha`
/// on the same draws.
pub fn vnce_gradients_reparam<M: ContinuousLatentModel, F: ReparamFamily>(
    model: &M,
    family: &F,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
    draws: &LatentDraws,
) -> Result<Evaluation> {
    vnce_reparam_eval(model, family, theta, alpha, prob, draws, true)
}

fn vnce_reparam_eval<M: ContinuousLatentModel, F: ReparamFamily>(
    model: &M,
    family: &F,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
    draws: &LatentDraws,
    grad: bool,
) -> Result<Evaluation> {
    if draws.samples != prob.cfg.latent_samples {
        return Err(Error::DimensionMismatch { expected: prob.cfg.latent_samples, got: draws.samples });
    }
    let np = model.n_params();
    let (n, m, nu) = (prob.cfg.n as f64, prob.cfg.m as f64, prob.cfg.nu);
    let s_count = draws.samples;
    let qd = family.prepare(alpha, prob.data)?;
    let qy = family.prepare(alpha, prob.noise)?;

    let d = reduce_rows(prob.data.n_rows(), np, || qd.new_acc(), |a, b| qd.merge(a, b), |i, p| {
        let row = prob.data.row(i);
        let k = model.latent_dim(row);
        if k != qd.latent_dim(i) {
            return Err(Error::DimensionMismatch { expected: k, got: qd.latent_dim(i) });
        }
        let lnpy = prob.log_nu_py_data[i];
        if k == 0 {
            let l = check_log_phi(model.log_phi(theta, row, &[]), "data", i)? - lnpy;
            let (t, live) = floor(-softplus(-l), &mut p.clamped);
            p.sum += t;
            p.terms.push(t);
            p.h.push(sigmoid(l));
            if grad {
                model.add_grad_theta(theta, row, &[], live * sigmoid(-l) / n, &mut p.grad_theta);
            }
            return Ok(());
        }
        let eps = &draws.data[i];
        let mut z = vec![0.0; s_count * k];
        let mut g_z = vec![0.0; s_count * k];
        let mut g_lq = vec![0.0; s_count];
        let (mut t, mut h) = (0.0, 0.0);
        for s in 0..s_count {
            let zs = &mut z[s * k..(s + 1) * k];
            let lq = qd.sample(i, &eps[s * k..(s + 1) * k], zs);
            let l = check_log_phi(model.log_phi(theta, row, zs), "data", i)? - lq - lnpy;
            let (ts, live) = floor(-softplus(-l), &mut p.clamped);
            t += ts / s_count as f64;
            h += sigmoid(l) / s_count as f64;
            if grad {
                let c = live * sigmoid(-l) / (s_count as f64 * n);
                model.add_grad_theta(theta, row, zs, c, &mut p.grad_theta);
                let gz = &mut g_z[s * k..(s + 1) * k];
                model.grad_z(theta, row, zs, gz);
                gz.iter_mut().for_each(|v| *v *= c);
                g_lq[s] = -c;
            }
        }
        if grad {
            qd.accumulate(i, eps, &z, &g_z, &g_lq, &mut p.acc);
        }
        p.sum += t;
        p.terms.push(t);
        p.h.push(h);
        Ok(())
    })?;

    let y = reduce_rows(prob.noise.n_rows(), np, || qy.new_acc(), |a, b| qy.merge(a, b), |j, p| {
        let row = prob.noise.row(j);
        let k = model.latent_dim(row);
        if k != qy.latent_dim(j) {
            return Err(Error::DimensionMismatch { expected: k, got: qy.latent_dim(j) });
        }
        let lnpy = prob.log_nu_py_noise[j];
        if k == 0 {
            let l = check_log_phi(model.log_phi(theta, row, &[]), "noise", j)? - lnpy;
            let (t, live) = floor(-softplus(l), &mut p.clamped);
            p.sum += t;
            p.terms.push(t);
            p.h.push(sigmoid(l));
            if grad {
                model.add_grad_theta(theta, row, &[], -live * nu * sigmoid(l) / m, &mut p.grad_theta);
            }
            return Ok(());
        }
        let eps = &draws.noise[j];
        let mut z = vec![0.0; s_count * k];
        let mut lw = vec![0.0; s_count];
        for s in 0..s_count {
            let zs = &mut z[s * k..(s + 1) * k];
            let lq = qy.sample(j, &eps[s * k..(s + 1) * k], zs);
            lw[s] = check_log_phi(model.log_phi(theta, row, zs), "noise", j)? - lq;
        }
        let lse = log_sum_exp_raw(&lw);
        let big_l = lse - (s_count as f64).ln() - lnpy;
        let (t, live) = floor(-softplus(big_l), &mut p.clamped);
        p.sum += t;
        p.terms.push(t);
        p.h.push(sigmoid(big_l));
        if grad && lse.is_finite() {
            let c = -live * nu * sigmoid(big_l) / m;
            let mut g_z = vec![0.0; s_count * k];
            let mut g_lq = vec![0.0; s_count];
            for s in 0..s_count {
                let w = (lw[s] - lse).exp();
                let zs = &z[s * k..(s + 1) * k];
                model.add_grad_theta(theta, row, zs, c * w, &mut p.grad_theta);
                let gz = &mut g_z[s * k..(s + 1) * k];
                model.grad_z(theta, row, zs, gz);
                gz.iter_mut().for_each(|v| *v *= c * w);
                g_lq[s] = -c * w;
            }
            qy.accumulate(j, eps, &z, &g_z, &g_lq, &mut p.acc);
        }
        Ok(())
    })?;

    let (report, gt, acc_d, acc_y) = finish_report(prob, d, y, Some(draws.seed));
    if !grad {
        return Ok(Evaluation { report, grad_theta: Vec::new(), grad_alpha: Vec::new() });
    }
    let mut ga = qd.finish(acc_d);
    add_assign(&mut ga, &qy.finish(acc_y));
    Ok(Evaluation { report, grad_theta: gt, grad_alpha: ga })
}

// ---- f-divergence diagnostics --------------------------------------------------

/// Per-row decomposition of the gap `J_NCE - J_VNCE`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FDivergenceRecord {
    /// `phi(x) / (phi(x) + nu p_y(x))`.
    pub kappa: Vec<f64>,
    /// `E_q log(kappa + (1 - kappa) q / p)`.
    pub f_div: Vec<f64>,
    /// `KL(q || p)` per row, `p` the true posterior.
    pub kl_qp: Vec<f64>,
    /// `KL(q || m)` per row, `m = kappa p + (1 - kappa) q`.
    pub kl_qm: Vec<f64>,
}

impl FDivergenceRecord {
    pub fn mean_f_div(&self) -> f64 {
        mean(&self.f_div)
    }
    pub fn mean_kl_qp(&self) -> f64 {
        mean(&self.kl_qp)
    }
    pub fn mean_kl_qm(&self) -> f64 {
        mean(&self.kl_qm)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Exact-enumeration diagnostics of the data rows of `prob`.
pub fn f_divergence_diagnostics<M: DiscreteLatentModel, Q: DiscretePosterior>(
    model: &M,
    q: &Q,
    theta: &[f64],
    alpha: &[f64],
    prob: &NceProblem<'_>,
) -> FDivergenceRecord {
    let rows = map_indexed(prob.data.n_rows(), |i| {
        let x = prob.data.row(i).values;
        let lphi: Vec<f64> = (0..model.n_states()).map(|z| model.log_phi(theta, x, z)).collect();
        let lphi_x = log_sum_exp_raw(&lphi);
        let l = lphi_x - prob.log_nu_py_data[i];
        let post = discrete_posterior(model, theta, x);
        let kappa = sigmoid(l);
        let one_k = sigmoid(-l);
        let (ln_k, ln_1k) = (-softplus(-l), -softplus(l));
        // Each quantity is E_q of a pointwise non-negative term, using
        // E_q[p/q] = E_q[m/q] = 1:
        //   KL(q||p) = E_q[r - 1 - log r],            r = p/q
        //   KL(q||m) = E_q[s - 1 - log s],            s = m/q
        //   f_div    = E_q[log(m/p) + (1-kappa)(r-1)]
        // log(1 + u) is taken through ln_1p while u is away from -1 and as a
        // log-sum-exp otherwise; q (r - 1) is p - q where r overflows.
        let (mut f, mut kqp, mut kqm) = (0.0, 0.0, 0.0);
        for (z, &pz) in post.iter().enumerate() {
            let lq = q.log_q(alpha, x, z);
            let qz = lq.exp();
            if qz == 0.0 {
                continue;
            }
            let a = pz.ln() - lq;
            let q_r1 = if a < 700.0 { qz * a.exp_m1() } else { pz - qz };
            let u = kappa * a.exp_m1();
            let v = if u.is_finite() && u > -0.5 { u.ln_1p() } else { log_sum_exp_raw(&[ln_k + a, ln_1k]) };
            let w = one_k * (-a).exp_m1();
            let log_m_over_p = if w > -0.5 { w.ln_1p() } else { log_sum_exp_raw(&[ln_k, ln_1k - a]) };
            let q_s1 = if a < 700.0 { qz * v.exp_m1() } else { kappa * q_r1 };
            kqp += (q_r1 - qz * a).max(0.0);
            kqm += (q_s1 - qz * v).max(0.0);
            f += (qz * log_m_over_p + one_k * q_r1).max(0.0);
        }
        (sigmoid(l), f, kqp, kqm)
    });
    FDivergenceRecord {
        kappa: rows.iter().map(|r| r.0).collect(),
        f_div: rows.iter().map(|r| r.1).collect(),
        kl_qp: rows.iter().map(|r| r.2).collect(),
        kl_qm: rows.iter().map(|r| r.3).collect(),
    }
}
