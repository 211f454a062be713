//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `cargo test -p vnce --test acceptance -- <filter>` runs the criteria whose
//! name contains `<filter>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use vnce::estimation::{em_vnce_exact, nce_maximise, LogParams, OptimiserConfig};
use vnce::experiments::{run_experiment, ExperimentConfig, ExperimentKind, GraphMethod};
use vnce::models::{discrete_posterior, DiscreteLatentModel, Marginalised, NormalisedMog, ToyModel, TruncGaussModel, TruncGaussParams, UnnormalisedMog};
use vnce::noise::{fit_truncnorm_moments, sample_noise, sample_noise_matched, EmpiricalGaussNoise, FactorisedTruncNormNoise};
use vnce::objectives::{
    f_divergence_diagnostics, nce_objective, vnce_gradients_enumerated, vnce_gradients_reparam, vnce_objective_enumerated,
    vnce_objective_reparam, LatentDraws, NceProblem,
};
use vnce::rng::rng_from;
use vnce::samplers::{gibbs_truncmvn, GibbsConfig};
use vnce::special_math::{erfcx, trunc_normal_moments};
use vnce::variational::{ExactPosterior, JointLognormal, LogisticQuadratic, MeanFieldNN, ReparamFamily};
use vnce::MaskedDataset;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn mog_sample(theta: f64, n: usize, seed: u64) -> MaskedDataset {
    let mut rng = rng_from(seed, &[]);
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let s = if rng.random::<bool>() { theta } else { 1.0 };
            s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        })
        .collect();
    MaskedDataset::from_scalars(&xs)
}

// ---- exact-enumeration identities ------------------------------------------

fn bound_and_identities() -> Outcome {
    let model = NormalisedMog { sigma1: 1.0 };
    let g = EmpiricalGaussNoise::isotropic(1, 9.0).map_err(|e| e.to_string())?;
    let mut rng = rng_from(101, &[]);
    let (mut bound, mut gap, mut per_row, mut min_f) = (f64::NEG_INFINITY, 0.0f64, 0.0f64, f64::INFINITY);
    for c in 0..100 {
        let data = mog_sample(rng.random_range(2.0..6.0), 50, 1000 + c);
        let noise = sample_noise(&g, rng.random_range(25..200), &mut rng).unwrap();
        let prob = NceProblem::new(&data, &noise, &g, 1).unwrap();
        let theta = [rng.random_range(0.5..8.0)];
        let alpha = [rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let nce = nce_objective(&Marginalised(&model), &theta, &prob).unwrap();
        let v = vnce_objective_enumerated(&model, &LogisticQuadratic, &theta, &alpha, &prob).unwrap();
        let f = f_divergence_diagnostics(&model, &LogisticQuadratic, &theta, &alpha, &prob);
        bound = bound.max(v.value - nce.value);
        gap = gap.max((nce.value - v.value - f.mean_f_div()).abs());
        for i in 0..data.n_rows() {
            per_row = per_row.max((f.f_div[i] - (f.kl_qp[i] - f.kl_qm[i])).abs());
            min_f = min_f.min(f.f_div[i]);
        }
    }
    check(
        bound <= 1e-12 && gap <= 1e-10 && per_row <= 1e-10 && min_f >= 0.0,
        format!("max(J_VNCE-J_NCE)={bound:.2e} gap err={gap:.2e} row identity err={per_row:.2e} min f_div={min_f:.2e}"),
    )
}

fn tightness_and_zero_variance() -> Outcome {
    let model = NormalisedMog { sigma1: 1.0 };
    let g = EmpiricalGaussNoise::isotropic(1, 16.0).unwrap();
    let data = mog_sample(4.0, 500, 7);
    let noise = sample_noise(&g, 500, &mut rng_from(8, &[])).unwrap();
    let prob = NceProblem::new(&data, &noise, &g, 1).unwrap();
    let mut worst_term = 0.0f64;
    let mut worst_spread = 0.0f64;
    for theta in [1.5, 3.3, 4.0, 6.0] {
        let q = ExactPosterior { model: &model, theta: vec![theta] };
        let nce = nce_objective(&Marginalised(&model), &[theta], &prob).unwrap();
        let v = vnce_objective_enumerated(&model, &q, &[theta], &[], &prob).unwrap();
        for (a, b) in nce.data_row_terms.iter().zip(&v.data_row_terms).chain(nce.noise_row_terms.iter().zip(&v.noise_row_terms)) {
            worst_term = worst_term.max((a - b).abs());
        }
        // phi(x, z) / p(z | x) is the same for every z
        for row in data.rows().chain(noise.rows()) {
            let post = discrete_posterior(&model, &[theta], row.values);
            let w: Vec<f64> = (0..model.n_states()).map(|z| model.log_phi(&[theta], row.values, z) - post[z].ln()).collect();
            let spread = w.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - w.iter().fold(f64::INFINITY, |m, v| m.min(*v));
            worst_spread = worst_spread.max(spread);
        }
    }
    check(
        worst_term <= 1e-12 && worst_spread <= 1e-12,
        format!("max |VNCE term - NCE term|={worst_term:.2e} max log-weight spread={worst_spread:.2e}"),
    )
}

fn kl_limit() -> Outcome {
    let model = NormalisedMog { sigma1: 1.0 };
    let g = EmpiricalGaussNoise::isotropic(1, 16.0).unwrap();
    let data = mog_sample(4.0, 400, 21);
    let noise = sample_noise(&g, 400, &mut rng_from(22, &[])).unwrap();
    let theta = [3.0];
    let alpha = [0.3, -0.2, -0.1];
    let mut gaps = Vec::new();
    let mut last_rel = f64::NAN;
    for nu in [1.0, 10.0, 100.0, 1000.0] {
        let prob = NceProblem::with_nu(&data, &noise, &g, 1, nu).unwrap();
        let f = f_divergence_diagnostics(&model, &LogisticQuadratic, &theta, &alpha, &prob);
        let gap = (f.mean_f_div() - f.mean_kl_qp()).abs();
        last_rel = gap / f.mean_kl_qp();
        gaps.push(gap);
    }
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    check(
        monotone && last_rel < 0.01,
        format!("|f_div - KL(q||p)| over nu=1,10,100,1000: {}; relative at 1000 = {last_rel:.2e}", sci(&gaps)),
    )
}

fn em_monotonicity() -> Outcome {
    let data = mog_sample(4.0, 10_000, 31);
    let g = EmpiricalGaussNoise::isotropic(1, 16.0).unwrap();
    let noise = sample_noise(&g, 10_000, &mut rng_from(32, &[])).unwrap();
    let prob = NceProblem::new(&data, &noise, &g, 1).unwrap();
    let base = NormalisedMog { sigma1: 1.0 };
    let model = LogParams::new(&base, vec![true]);
    let cfg = OptimiserConfig { max_iters: 100, tolerance: 1e-10, ..Default::default() };
    let trace = em_vnce_exact(&model, &[1.5f64.ln()], &prob, 20, &cfg).map_err(|e| e.to_string())?;
    let direct = nce_maximise(&Marginalised(&model), &[1.5f64.ln()], &prob, 200, 1e-12).map_err(|e| e.to_string())?;
    let em_theta = trace.final_theta()[0].exp();
    let nce_theta = direct.x[0].exp();
    let drop = trace.max_nce_decrease();
    check(
        drop <= 1e-9 && (em_theta - nce_theta).abs() < 1e-2,
        format!("max J_NCE decrease={drop:.2e}; EM theta={em_theta:.6} direct NCE theta={nce_theta:.6}"),
    )
}

// ---- gradients ---------------------------------------------------------------

fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], idx: &[usize], h: f64) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute error relative to the largest finite-difference entry.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn gradient_checks() -> Outcome {
    let tol = 1e-5;
    let mut report = Vec::new();
    let mut ok = true;
    let mut record = |label: &str, e: f64| {
        ok &= e <= tol;
        report.push(format!("{label}={e:.1e}"));
    };

    // unnormalised MoG with a logistic-quadratic posterior
    let model = UnnormalisedMog { sigma1: 1.0 };
    let g = EmpiricalGaussNoise::isotropic(1, 16.0).unwrap();
    let data = mog_sample(4.0, 500, 41);
    let noise = sample_noise(&g, 500, &mut rng_from(42, &[])).unwrap();
    let prob = NceProblem::new(&data, &noise, &g, 1).unwrap();
    let (theta, alpha) = ([3.1, 2.0], [0.4, -0.1, -0.3]);
    let e = vnce_gradients_enumerated(&model, &LogisticQuadratic, &theta, &alpha, &prob).unwrap();
    let f = |t: &[f64], a: &[f64]| vnce_objective_enumerated(&model, &LogisticQuadratic, t, a, &prob).unwrap().value;
    record("mog theta", rel_err(&e.grad_theta, &fd(|t| f(t, &alpha), &theta, &[0, 1], 1e-5)));
    record("mog alpha", rel_err(&e.grad_alpha, &fd(|a| f(&theta, a), &alpha, &[0, 1, 2], 1e-5)));

    // toy model with the mean-field network posterior
    let toy = ToyModel::default();
    let mut rng = rng_from(43, &[]);
    let rows: Vec<Vec<f64>> = (0..60).map(|_| toy.sample(&mut rng).0.to_vec()).collect();
    let data = MaskedDataset::from_rows(&rows).unwrap();
    let g = vnce::noise::gaussian_noise_from_data(&data).unwrap();
    let noise = sample_noise(&g, 60, &mut rng).unwrap();
    let prob = NceProblem::new(&data, &noise, &g, 5).unwrap();
    let net = MeanFieldNN::default();
    let scale = 1.0 / (net.hidden as f64).sqrt();
    let alpha: Vec<f64> = (0..net.n_weights()).map(|_| rng.random_range(-scale..scale)).collect();
    let draws = LatentDraws::for_model(&prob, &toy, 44);
    let e = vnce_gradients_reparam(&toy, &net, &[], &alpha, &prob, &draws).unwrap();
    let f = |a: &[f64]| vnce_objective_reparam(&toy, &net, &[], a, &prob, &draws).unwrap().value;
    let idx: Vec<usize> = (0..200).map(|_| rng.random_range(0..alpha.len())).collect();
    let picked: Vec<f64> = idx.iter().map(|&i| e.grad_alpha[i]).collect();
    record("toy alpha (200 weights)", rel_err(&picked, &fd(f, &alpha, &idx, 1e-6)));
    let dir: Vec<f64> = (0..alpha.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let h = 1e-6;
    let shifted = |s: f64| alpha.iter().zip(&dir).map(|(a, d)| a + s * d).collect::<Vec<f64>>();
    let numeric = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    let analytic: f64 = e.grad_alpha.iter().zip(&dir).map(|(g, d)| g * d).sum();
    record("toy alpha (direction)", (analytic - numeric).abs() / numeric.abs());

    // truncated Gaussian with the conditional lognormal posterior
    let d = 4;
    let model = TruncGaussModel { d };
    let mut rng = rng_from(45, &[]);
    let n = 60;
    let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.05..2.5)).collect();
    let mask: Vec<bool> = (0..n * d).map(|_| rng.random::<f64>() > 0.3).collect();
    let data = MaskedDataset::with_mask(n, d, values, mask).unwrap();
    let noise_model = FactorisedTruncNormNoise::new(vec![0.5; d], vec![1.0; d]).unwrap();
    let noise = sample_noise_matched(&noise_model, &data, 3, &mut rng).unwrap();
    let prob = NceProblem::new(&data, &noise, &noise_model, 5).unwrap();
    let fam = JointLognormal { d, diagonal: false };
    let alpha: Vec<f64> = (0..fam.n_params()).map(|_| rng.random_range(-0.4..0.4)).collect();
    let mut k = nalgebra::DMatrix::identity(d, d) * 1.8;
    for i in 0..d {
        let j = (i + 1) % d;
        k[(i, j)] = 0.35;
        k[(j, i)] = 0.35;
    }
    let theta = TruncGaussParams::new(k, 0.4).unwrap().to_theta();
    let draws = LatentDraws::for_model(&prob, &model, 46);
    let e = vnce_gradients_reparam(&model, &fam, &theta, &alpha, &prob, &draws).unwrap();
    let f = |t: &[f64], a: &[f64]| vnce_objective_reparam(&model, &fam, t, a, &prob, &draws).unwrap().value;
    let all = |v: &[f64]| (0..v.len()).collect::<Vec<_>>();
    record("truncgauss theta", rel_err(&e.grad_theta, &fd(|t| f(t, &alpha), &theta, &all(&theta), 1e-6)));
    record("lognormal alpha", rel_err(&e.grad_alpha, &fd(|a| f(&theta, a), &alpha, &all(&alpha), 1e-6)));

    check(ok, report.join(" "))
}

// ---- special functions and sampler -------------------------------------------

/// erfcx(x) from a 40-digit mpmath evaluation of erfc(x) exp(x^2).
const ERFCX_REF: [(f64, f64); 10] = [
    (-5.0, 144_009_798_674.661_04),
    (-1.0, 5.008_980_080_762_283),
    (0.0, 1.0),
    (0.5, 0.615_690_344_192_925_9),
    (1.0, 0.427_583_576_155_807),
    (3.0, 0.179_001_151_181_389_95),
    (10.0, 0.056_140_992_743_822_59),
    (30.0, 0.018_795_888_861_416_75),
    (1e3, 5.641_893_014_533_876e-4),
    (1e6, 5.641_895_835_474_742e-7),
];

fn special_math() -> Outcome {
    let erfcx_err = ERFCX_REF
        .iter()
        .map(|&(x, want)| erfcx(x).map(|got| ((got - want) / want).abs()))
        .collect::<vnce::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?
        .into_iter()
        .fold(0.0, f64::max);
    let mut rng = rng_from(51, &[]);
    let mut trip = 0.0f64;
    for _ in 0..100 {
        let (mu, sigma) = (rng.random_range(-1.0..3.0), rng.random_range(0.3..3.0));
        let m = trunc_normal_moments(mu, sigma).map_err(|e| e.to_string())?;
        let (mu_fit, sigma_fit) = fit_truncnorm_moments(m.mu_bar, m.sigma2_bar).map_err(|e| e.to_string())?;
        trip = trip.max((mu_fit - mu).abs()).max((sigma_fit - sigma).abs());
    }
    let half = 2.0 / std::f64::consts::PI;
    let (mu0, s0) = fit_truncnorm_moments(half.sqrt(), 1.0 - half).map_err(|e| e.to_string())?;
    let half_err = mu0.abs().max((s0 - 1.0).abs());
    check(
        erfcx_err <= 1e-12 && trip <= 1e-6 && half_err <= 1e-5,
        format!("erfcx rel err={erfcx_err:.1e} round trip err={trip:.1e} half-normal fit err={half_err:.1e}"),
    )
}

fn gibbs_half_normal() -> Outcome {
    let p = TruncGaussParams::new(nalgebra::DMatrix::identity(2, 2), 0.0).unwrap();
    let n = 10_000;
    let ds = gibbs_truncmvn(&p, n, GibbsConfig::new(61)).map_err(|e| e.to_string())?;
    let target = (2.0 / std::f64::consts::PI).sqrt();
    let se = ((1.0 - 2.0 / std::f64::consts::PI) / n as f64).sqrt();
    let z: Vec<f64> = (0..2)
        .map(|j| {
            let col = ds.column_observed(j);
            (col.iter().sum::<f64>() / col.len() as f64 - target) / se
        })
        .collect();
    check(z.iter().all(|v| v.abs() < 4.0), format!("column mean z-scores {z:.2?}"))
}

// ---- experiments ------------------------------------------------------------

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header = r.headers().map_err(|e| e.to_string())?.clone();
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| e.to_string())?;
            Ok(header.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn base_config(kind: ExperimentKind, seed: u64, dir: &Path) -> ExperimentConfig {
    ExperimentConfig { experiment: kind, seed, output_dir: dir.to_path_buf(), ..Default::default() }
}

fn mog_consistency() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig { runs: 50, sizes: vec![500, 5000, 50_000], ..base_config(ExperimentKind::MogPopulation, 2019, tmp.path()) };
    let summary = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rows = read_csv(&tmp.path().join("mog_summary.csv"))?;
    let median = |est: &str, n: usize| -> Result<f64, String> {
        let row = rows.iter().find(|r| r["estimator"] == est && r["n"] == n.to_string()).ok_or("missing summary row")?;
        row["median_mse"].parse::<f64>().map_err(|e| e.to_string())
    };
    let vnce = cfg.sizes.iter().map(|&n| median("vnce", n)).collect::<Result<Vec<_>, _>>()?;
    let mle = median("mle", 50_000)?;
    let decreasing = vnce.windows(2).all(|w| w[1] < w[0]);
    let ratio = vnce[2] / mle;
    check(
        decreasing && ratio <= 3.0 && summary.failed_cells() == 0,
        format!(
            "median MSE(VNCE) at n=500,5000,50000: {}; MLE at 50000: {mle:.3e}; ratio {ratio:.2}; failed cells {}",
            sci(&vnce),
            summary.failed_cells()
        ),
    )
}

fn graph_recovery() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        fractions: vec![0.0, 0.3],
        methods: vec![GraphMethod::Vnce, GraphMethod::NceImputed],
        save_artifacts: false,
        ..base_config(ExperimentKind::GraphMissing, 2024, tmp.path())
    };
    run_experiment(&cfg).map_err(|e| e.to_string())?;
    let rows = read_csv(&tmp.path().join("graph_cells.csv"))?;
    let auc = |ds: usize, p: &str, method: &str| -> Result<f64, String> {
        let row = rows
            .iter()
            .find(|r| r["dataset"] == ds.to_string() && r["fraction"] == p && r["method"] == method)
            .ok_or_else(|| format!("no cell for dataset {ds}, p={p}, {method}"))?;
        row["auc"].parse::<f64>().map_err(|_| format!("dataset {ds}, p={p}, {method} failed"))
    };
    let mut wins = 0;
    let mut diffs0 = Vec::new();
    let mut pairs = Vec::new();
    for ds in 0..cfg.datasets {
        let (v, n) = (auc(ds, "0.3", "vnce")?, auc(ds, "0.3", "nce_imputed")?);
        wins += usize::from(v > n);
        pairs.push(format!("{v:.3}/{n:.3}"));
        diffs0.push((auc(ds, "0", "vnce")? - auc(ds, "0", "nce_imputed")?).abs());
    }
    diffs0.sort_by(f64::total_cmp);
    let med0 = 0.5 * (diffs0[4] + diffs0[5]);
    check(
        wins >= 7 && med0 < 0.05,
        format!("p=0.3: VNCE beats NCE-imputed on {wins}/10 datasets (VNCE/NCE AUC {}); p=0: median |dAUC|={med0:.3}", pairs.join(" ")),
    )
}

fn csv_files(root: &Path) -> Vec<String> {
    let mut stack = vec![root.to_path_buf()];
    let mut out = Vec::new();
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = |kind: ExperimentKind, dir: &Path| ExperimentConfig {
        n_train: 400,
        epochs: 2,
        grid_points: 31,
        runs: 3,
        sizes: vec![300, 1000],
        d: 5,
        n: 150,
        datasets: 2,
        fractions: vec![0.0, 0.3],
        mc_mle_epochs: 5,
        mc_mle_step_sizes: vec![0.03],
        max_iters: 20,
        ..base_config(kind, 77, dir)
    };
    let mut compared = 0;
    for kind in [ExperimentKind::PosteriorGrid, ExperimentKind::MogPopulation, ExperimentKind::GraphMissing] {
        let (a, b) = (tmp.path().join(format!("{}_a", kind.name())), tmp.path().join(format!("{}_b", kind.name())));
        run_experiment(&small(kind, &a)).map_err(|e| e.to_string())?;
        run_experiment(&small(kind, &b)).map_err(|e| e.to_string())?;
        let files = csv_files(&a);
        if files.is_empty() || files != csv_files(&b) {
            return Err(format!("{}: output file sets differ or are empty", kind.name()));
        }
        for f in &files {
            if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
                return Err(format!("{}: {f} differs between runs", kind.name()));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} CSV files byte-identical across repeated runs of all three experiments"))
}

const CRITERIA: [Criterion; 10] = [
    Criterion { name: "bound_and_identities", budget: Duration::from_secs(10), run: bound_and_identities },
    Criterion { name: "tightness_zero_variance", budget: Duration::from_secs(5), run: tightness_and_zero_variance },
    Criterion { name: "kl_limit", budget: Duration::from_secs(10), run: kl_limit },
    Criterion { name: "em_monotonicity", budget: Duration::from_secs(60), run: em_monotonicity },
    Criterion { name: "gradient_checks", budget: Duration::from_secs(120), run: gradient_checks },
    Criterion { name: "special_math", budget: Duration::from_secs(10), run: special_math },
    Criterion { name: "gibbs_half_normal", budget: Duration::from_secs(30), run: gibbs_half_normal },
    Criterion { name: "mog_consistency", budget: Duration::from_secs(20 * 60), run: mog_consistency },
    Criterion { name: "graph_recovery", budget: Duration::from_secs(30 * 60), run: graph_recovery },
    Criterion { name: "reproducibility", budget: Duration::from_secs(10 * 60), run: reproducibility },
];

fn main() -> ExitCode {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| filter.as_deref().is_none_or(|f| c.name.contains(f))) {
        let start = Instant::now();
        let outcome = (c.run)();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("{} {} [{:.1}s] {detail}", if pass { "PASS" } else { "FAIL" }, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
