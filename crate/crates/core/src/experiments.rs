//! Experiment drivers: posterior density grids for the 2D toy model, the
//! mixture-of-Gaussians population study and graph recovery from incomplete
//! data.
//!
//! Every driver turns an [`ExperimentConfig`] into a list of independent
//! cells, runs them (in parallel when enabled), and writes RFC-4180 CSV files
//! plus a `manifest.json`. Each cell draws from its own stream derived from
//! the master seed and the cell's coordinates, and rows are written in cell
//! order, so the CSV bytes depend only on the config. Wall-clock times only
//! go into the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::statistics::{Data, Median, OrderStatistics};

use crate::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::estimation::{
    best_of_restarts, mc_mle_sga, mle_unnormalised_mog, nce_maximise, variational_em, EnumeratedTarget, LogParams,
    McMleConfig, OptimiserConfig, ReparamTarget, ResamplePolicy,
};
use crate::models::{unpack_symmetric, ContinuousLatentModel, Marginalised, ToyModel, TruncGaussModel, UnnormalisedMog};
use crate::noise::{
    fit_factorised_truncnorm_lenient, gaussian_noise_from_data, sample_noise, sample_noise_matched, EmpiricalGaussNoise,
    NoiseModel,
};
use crate::objectives::{vnce_gradients_reparam, LatentDraws, NceProblem};
use crate::par::map_indexed;
use crate::rng::{derive_seed, rng_from};
use crate::samplers::{
    build_ground_truth_precision, fmt_f64, gibbs_truncmvn, inject_missingness, save_dataset, DatasetSidecar, GibbsConfig,
    GraphKind,
};
use crate::special_math::log_sum_exp_raw;
use crate::variational::{
    JointLognormal, LogisticQuadratic, LogisticQuadraticParams, MeanFieldGaussian, MeanFieldNN, PreparedFamily,
    ReparamFamily,
};

// ---- Configuration ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PosteriorGrid,
    MogPopulation,
    GraphMissing,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::PosteriorGrid => "posterior_grid",
            ExperimentKind::MogPopulation => "mog_population",
            ExperimentKind::GraphMissing => "graph_missing",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior_grid" => Ok(ExperimentKind::PosteriorGrid),
            "mog_population" => Ok(ExperimentKind::MogPopulation),
            "graph_missing" => Ok(ExperimentKind::GraphMissing),
            other => Err(Error::Config(format!(
                "unknown experiment '{other}' (posterior_grid|mog_population|graph_missing)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMethod {
    Vnce,
    NceImputed,
    McMle,
}

impl GraphMethod {
    pub fn name(self) -> &'static str {
        match self {
            GraphMethod::Vnce => "vnce",
            GraphMethod::NceImputed => "nce_imputed",
            GraphMethod::McMle => "mc_mle",
        }
    }
}

/// Flat key-value run configuration, read from TOML.
///
/// `experiment` and `seed` are required; every other key has a desk-scale
/// default and keys that do not apply to the chosen experiment are ignored.
/// Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 means one per core.
    pub workers: usize,
    /// Noise-to-data ratio; defaults to 1 (toy and mixture) or 10 (graphs).
    pub nu: Option<f64>,
    /// Reparametrised draws per row.
    pub latent_samples: usize,
    pub max_iters: usize,
    pub alternation_period: usize,
    pub restarts: usize,

    // posterior_grid
    pub landmarks: Vec<[f64; 2]>,
    pub nu_large: f64,
    pub n_train: usize,
    pub grid_points: usize,
    pub grid_half_width: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch: usize,

    // mog_population
    pub runs: usize,
    pub sizes: Vec<usize>,
    /// Fixes the ground truth for every run instead of sampling it.
    pub theta_star: Option<f64>,
    pub theta_star_range: [f64; 2],
    /// Restart points are log-uniform on this interval.
    pub theta_init_range: [f64; 2],
    pub sigma1: f64,

    // graph_missing
    pub graph: GraphKind,
    pub d: usize,
    pub n: usize,
    pub datasets: usize,
    pub fractions: Vec<f64>,
    pub methods: Vec<GraphMethod>,
    /// Required when `methods` includes MC-MLE; every step size is a cell.
    pub mc_mle_step_sizes: Vec<f64>,
    pub mc_mle_epochs: usize,
    pub gibbs_burnin: usize,
    pub gibbs_thin: usize,
    /// Persist generated datasets and estimated matrices next to the tables.
    pub save_artifacts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::GraphMissing,
            seed: 0,
            output_dir: PathBuf::from("results"),
            workers: 0,
            nu: None,
            latent_samples: 5,
            max_iters: 80,
            alternation_period: 5,
            restarts: 5,
            landmarks: vec![[0.0, 0.0], [1.0, 1.0], [-1.0, -1.0]],
            nu_large: 100.0,
            n_train: 10_000,
            grid_points: 101,
            grid_half_width: 4.0,
            epochs: 50,
            learning_rate: 1e-4,
            minibatch: 100,
            runs: 50,
            sizes: vec![500, 2000, 10_000, 50_000],
            theta_star: None,
            theta_star_range: [2.0, 6.0],
            theta_init_range: [0.5, 10.0],
            sigma1: 1.0,
            graph: GraphKind::Ring,
            d: 8,
            n: 500,
            datasets: 10,
            fractions: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            methods: vec![GraphMethod::Vnce, GraphMethod::NceImputed, GraphMethod::McMle],
            mc_mle_step_sizes: Vec::new(),
            mc_mle_epochs: 80,
            gibbs_burnin: 100,
            gibbs_thin: 10,
            save_artifacts: true,
        }
    }
}

const REQUIRED_KEYS: [&str; 2] = ["experiment", "seed"];

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for key in REQUIRED_KEYS {
            if !table.contains_key(key) {
                return Err(Error::Config(format!("missing required key '{key}'")));
            }
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The paper's full-size settings: `d = 20`, `n = 1000` and 500
    /// population runs.
    pub fn apply_paper_scale(&mut self) {
        self.d = 20;
        self.n = 1000;
        self.runs = 500;
    }

    pub fn nu(&self) -> f64 {
        self.nu.unwrap_or(match self.experiment {
            ExperimentKind::GraphMissing => 10.0,
            _ => 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let nu = self.nu();
        if !(nu > 0.0) || !nu.is_finite() {
            return bad(format!("nu must be positive and finite, got {nu}"));
        }
        if self.latent_samples == 0 || self.max_iters == 0 || self.alternation_period == 0 || self.restarts == 0 {
            return bad("latent_samples, max_iters, alternation_period and restarts must be at least 1".into());
        }
        match self.experiment {
            ExperimentKind::PosteriorGrid => {
                if self.landmarks.is_empty() || self.landmarks.iter().flatten().any(|v| !v.is_finite()) {
                    return bad("landmarks must be a non-empty list of finite [x1, x2] pairs".into());
                }
                if !(self.nu_large > 0.0) || self.grid_points < 3 || !(self.grid_half_width > 0.0) {
                    return bad("need nu_large > 0, grid_points >= 3 and grid_half_width > 0".into());
                }
                if self.n_train < 2 || self.epochs == 0 || self.minibatch == 0 || !(self.learning_rate > 0.0) {
                    return bad("need n_train >= 2, epochs >= 1, minibatch >= 1 and learning_rate > 0".into());
                }
            }
            ExperimentKind::MogPopulation => {
                if self.runs == 0 || self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 2) {
                    return bad("need runs >= 1 and a non-empty list of sizes, each at least 2".into());
                }
                let [lo, hi] = self.theta_star_range;
                if !(0.0 < lo && lo < hi) {
                    return bad(format!("theta_star_range must satisfy 0 < low < high, got {lo}, {hi}"));
                }
                let [lo, hi] = self.theta_init_range;
                if !(0.0 < lo && lo < hi) {
                    return bad(format!("theta_init_range must satisfy 0 < low < high, got {lo}, {hi}"));
                }
                if self.theta_star.is_some_and(|t| !(t > 0.0)) || !(self.sigma1 > 0.0) {
                    return bad("theta_star and sigma1 must be positive".into());
                }
            }
            ExperimentKind::GraphMissing => {
                if nu.fract() != 0.0 {
                    return bad(format!("graph_missing pairs nu noise rows with every data row; nu must be an integer, got {nu}"));
                }
                if self.d < 3 || self.n < 2 || self.datasets == 0 {
                    return bad("need d >= 3, n >= 2 and datasets >= 1".into());
                }
                if self.fractions.is_empty() || self.fractions.iter().any(|p| !(0.0..=0.5).contains(p)) {
                    return bad("fractions must be a non-empty list of values in [0, 0.5]".into());
                }
                if self.methods.is_empty() {
                    return bad("methods must not be empty".into());
                }
                if self.methods.contains(&GraphMethod::McMle)
                    && (self.mc_mle_step_sizes.is_empty() || self.mc_mle_step_sizes.iter().any(|s| !(*s > 0.0)))
                {
                    return bad("mc_mle needs mc_mle_step_sizes, a non-empty list of positive step sizes (there is no default)".into());
                }
                if self.gibbs_thin == 0 || self.mc_mle_epochs == 0 || self.minibatch == 0 {
                    return bad("gibbs_thin, mc_mle_epochs and minibatch must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    fn optimiser(&self) -> OptimiserConfig {
        OptimiserConfig {
            max_iters: self.max_iters,
            alternation_period: self.alternation_period,
            restarts: self.restarts,
            ..OptimiserConfig::default()
        }
    }
}

// ---- ROC ------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Descending, from `+inf` to `-inf`.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC of edge recovery. Scores are the signed entries `K_est[i,j]` over the
/// upper triangle, an edge is `K_true[i,j] != 0`, and an entry is called an
/// edge when its score is at least the threshold.
pub fn roc_auc(k_est: &DMatrix<f64>, k_true: &DMatrix<f64>) -> Result<RocResult> {
    if k_est.shape() != k_true.shape() || !k_est.is_square() {
        return Err(Error::DimensionMismatch { expected: k_true.nrows(), got: k_est.nrows() });
    }
    let d = k_true.nrows();
    let pairs: Vec<(f64, bool)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| (k_est[(i, j)], k_true[(i, j)] != 0.0))
        .collect();
    if pairs.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::NonFinite("estimated matrix has NaN entries".into()));
    }
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Domain("AUC is undefined when the true graph is empty or complete".into()));
    }
    let mut scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut thresholds = vec![f64::INFINITY];
    thresholds.extend(scores);
    thresholds.push(f64::NEG_INFINITY);
    let (mut tpr, mut fpr) = (Vec::new(), Vec::new());
    for &t in &thresholds {
        let tp = pairs.iter().filter(|p| p.1 && p.0 >= t).count();
        let fp = pairs.iter().filter(|p| !p.1 && p.0 >= t).count();
        tpr.push(tp as f64 / pos as f64);
        fpr.push(fp as f64 / neg as f64);
    }
    let auc = (1..thresholds.len()).map(|k| 0.5 * (fpr[k] - fpr[k - 1]) * (tpr[k] + tpr[k - 1])).sum::<f64>();
    Ok(RocResult { thresholds, tpr, fpr, auc: auc.clamp(0.0, 1.0) })
}

// ---- Cells, manifest and output helpers --------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub index: usize,
    pub label: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: ExperimentKind,
    pub code_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

impl RunSummary {
    pub fn failed_cells(&self) -> usize {
        self.manifest.cells.iter().filter(|c| !c.ok).count()
    }
}

/// `git describe` of the source tree when available, else the crate version.
pub fn code_version() -> String {
    let version = env!("CARGO_PKG_VERSION");
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| format!("{version}+{}", String::from_utf8_lossy(&o.stdout).trim()))
        .unwrap_or_else(|| version.to_string())
}

struct Cell<K> {
    label: String,
    seed: u64,
    key: K,
}

/// Runs every cell, keeping per-cell failures as records.
fn run_cells<K, T, F>(cells: &[Cell<K>], offset: usize, f: F) -> (Vec<CellRecord>, Vec<Option<T>>)
where
    K: Sync,
    T: Send,
    F: Fn(&K, u64) -> Result<T> + Sync + Send,
{
    let out = map_indexed(cells.len(), |i| {
        let c = &cells[i];
        let start = Instant::now();
        let r = f(&c.key, c.seed);
        (r, start.elapsed().as_secs_f64())
    });
    let mut records = Vec::with_capacity(cells.len());
    let mut values = Vec::with_capacity(cells.len());
    for (i, (c, (r, secs))) in cells.iter().zip(out).enumerate() {
        let (ok, error, v) = match r {
            Ok(v) => (true, None, Some(v)),
            Err(e) => {
                log::warn!("cell {} ({}) failed: {e}", offset + i, c.label);
                (false, Some(e.to_string()), None)
            }
        };
        records.push(CellRecord { index: offset + i, label: c.label.clone(), seed: c.seed, ok, error, wall_seconds: secs });
        values.push(v);
    }
    (records, values)
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn matrix(&mut self, name: &str, k: &DMatrix<f64>) -> Result<()> {
        let header: Vec<String> = (0..k.ncols()).map(|j| format!("k{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..k.nrows()).map(|i| (0..k.ncols()).map(|j| fmt_f64(k[(i, j)])).collect::<Vec<_>>());
        self.csv(name, &header, rows)
    }
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Median and two order statistics (as fractions in `(0, 1)`) of `v`.
fn summarise(v: &[f64], lo: f64, hi: f64) -> Option<(f64, f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let mut data = Data::new(v.to_vec());
    Some((data.median(), data.quantile(lo), data.quantile(hi)))
}

/// Reads a square matrix from a headed CSV, as written by the graph
/// experiment.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Vec<Vec<f64>> = r
        .records()
        .map(|rec| {
            rec?.iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{}: bad number '{s}': {e}", path.display()))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Domain(format!("{} is not a square matrix", path.display())));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// Runs the configured experiment and writes its outputs and manifest into
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let mut out = Outputs::new(&cfg.output_dir)?;
    let config_hash = cfg.hash()?;
    log::info!("{} seed={} config={config_hash}", cfg.experiment.name(), cfg.seed);
    let cells = match cfg.experiment {
        ExperimentKind::PosteriorGrid => run_posterior_grid(cfg, &mut out)?,
        ExperimentKind::MogPopulation => run_mog_population(cfg, &mut out)?,
        ExperimentKind::GraphMissing => run_graph_missing(cfg, &mut out)?,
    };
    let manifest = Manifest {
        experiment: cfg.experiment,
        code_version: code_version(),
        config_hash,
        seed: cfg.seed,
        config: cfg.clone(),
        cells,
        outputs: out.files,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let manifest_path = cfg.output_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunSummary { manifest, manifest_path })
}

// ---- Posterior grids for the toy model ----------------------------------------------

/// Cell-centred square grid on `[-w, w]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentGrid {
    pub points: usize,
    pub half_width: f64,
}

impl LatentGrid {
    pub fn step(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.step() * self.step()
    }

    pub fn coord(&self, k: usize) -> f64 {
        (k as f64 + 0.5 - 0.5 * self.points as f64) * self.step()
    }

    /// `(z1, z2)` in row-major order, `z2` fastest.
    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.points).flat_map(move |a| (0..self.points).map(move |b| [self.coord(a), self.coord(b)]))
    }
}

/// Density of `p(z | x)` on `grid` by numerical integration of the joint,
/// with the fraction of the posterior mass that lies inside the grid
/// (estimated against a grid twice as wide).
pub fn toy_true_posterior(model: &ToyModel, x: [f64; 2], grid: &LatentGrid) -> (Vec<f64>, f64) {
    let lj: Vec<f64> = grid.nodes().map(|z| model.log_joint(x, z)).collect();
    let inner = log_sum_exp_raw(&lj);
    let wide = LatentGrid { points: 2 * grid.points, half_width: 2.0 * grid.half_width };
    let outer = log_sum_exp_raw(&wide.nodes().map(|z| model.log_joint(x, z)).collect::<Vec<_>>());
    let area = grid.cell_area();
    let dens = lj.iter().map(|v| (v - inner).exp() / area).collect();
    (dens, (inner - outer).exp().min(1.0))
}

fn q_grid(net: &MeanFieldNN, alpha: &[f64], x: [f64; 2], grid: &LatentGrid) -> (Vec<f64>, MeanFieldGaussian) {
    let act = net.forward(alpha, &x);
    let q = MeanFieldGaussian { mu: act.mu.clone(), log_var: act.log_var.clone() };
    (grid.nodes().map(|z| q.log_density(&z).exp()).collect(), q)
}

/// Total-variation distance between two densities on the same grid.
pub fn grid_tv(p: &[f64], q: &[f64], cell_area: f64) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() * cell_area
}

/// Adam ascent on a parameter vector.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn ascend(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Reparametrised ELBO gradient of a minibatch, averaged over rows.
fn elbo_gradient(model: &ToyModel, net: &MeanFieldNN, alpha: &[f64], batch: &MaskedDataset, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let q = net.prepare(alpha, batch)?;
    let scale = 1.0 / (samples * batch.n_rows()) as f64;
    let parts = crate::par::map_chunks(batch.n_rows(), crate::par::CHUNK, |range| {
        let mut acc = q.new_acc();
        for i in range {
            let k = q.latent_dim(i);
            let mut rng = rng_from(seed, &[i as u64]);
            let eps: Vec<f64> = (0..samples * k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut z = vec![0.0; samples * k];
            let mut g_z = vec![0.0; samples * k];
            for s in 0..samples {
                let zs = &mut z[s * k..(s + 1) * k];
                q.sample(i, &eps[s * k..(s + 1) * k], zs);
                model.grad_z(&[], batch.row(i), zs, &mut g_z[s * k..(s + 1) * k]);
            }
            g_z.iter_mut().for_each(|v| *v *= scale);
            q.accumulate(i, &eps, &z, &g_z, &vec![-scale; samples], &mut acc);
        }
        acc
    });
    let mut total = q.new_acc();
    for p in parts {
        q.merge(&mut total, p);
    }
    Ok(q.finish(total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GridMethod {
    Vi,
    Vnce { good_noise: bool, large_nu: bool },
}

impl GridMethod {
    fn label(self, nu: f64, nu_large: f64) -> String {
        match self {
            GridMethod::Vi => "vi".into(),
            GridMethod::Vnce { good_noise, large_nu } => {
                format!("vnce_{}_nu{}", if good_noise { "good" } else { "bad" }, if large_nu { nu_large } else { nu })
            }
        }
    }
}

/// Variance of the deliberately poor isotropic noise.
const BAD_NOISE_VAR: f64 = 30.0;

fn train_posterior(cfg: &ExperimentConfig, data: &MaskedDataset, method: GridMethod, seed: u64) -> Result<Vec<f64>> {
    let model = ToyModel::default();
    let net = MeanFieldNN::default();
    let mut rng = rng_from(seed, &[0]);
    let mut alpha = net.init(&mut rng);
    let mut adam = Adam::new(alpha.len(), cfg.learning_rate);
    let n = data.n_rows();
    let noise_setup = match method {
        GridMethod::Vi => None,
        GridMethod::Vnce { good_noise, large_nu } => {
            let noise = if good_noise { gaussian_noise_from_data(data)? } else { EmpiricalGaussNoise::isotropic(2, BAD_NOISE_VAR)? };
            let nu = if large_nu { cfg.nu_large } else { cfg.nu() };
            let pool = sample_noise(&noise, cfg.minibatch * cfg.epochs * n.div_ceil(cfg.minibatch), &mut rng_from(seed, &[1]))?;
            Some((noise, nu, pool))
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    let mut noise_pos = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.minibatch) {
            let batch = data.subset(rows);
            let g = match &noise_setup {
                None => elbo_gradient(&model, &net, &alpha, &batch, cfg.latent_samples, derive_seed(seed, &[2, step]))?,
                Some((noise, nu, pool)) => {
                    let idx: Vec<usize> = (noise_pos..noise_pos + rows.len()).collect();
                    noise_pos += rows.len();
                    let ybatch = pool.subset(&idx);
                    // noise rows are weighted by nu, so the batch needs only as many rows as the data
                    let prob = NceProblem::with_nu(&batch, &ybatch, noise, cfg.latent_samples, *nu)?;
                    let draws = LatentDraws::for_model(&prob, &model, derive_seed(seed, &[2, step]));
                    vnce_gradients_reparam(&model, &net, &[], &alpha, &prob, &draws)?.grad_alpha
                }
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at step {step}")));
            }
            adam.ascend(&mut alpha, &g);
            step += 1;
        }
    }
    Ok(alpha)
}

fn run_posterior_grid(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<CellRecord>> {
    let tag = cfg.experiment.tag();
    let model = ToyModel::default();
    let mut rng = rng_from(cfg.seed, &[tag, 0]);
    let mut values = Vec::with_capacity(2 * cfg.n_train);
    for _ in 0..cfg.n_train {
        values.extend(model.sample(&mut rng).0);
    }
    let data = MaskedDataset::complete(cfg.n_train, 2, values)?;
    let grid = LatentGrid { points: cfg.grid_points, half_width: cfg.grid_half_width };
    let methods = [
        GridMethod::Vi,
        GridMethod::Vnce { good_noise: true, large_nu: false },
        GridMethod::Vnce { good_noise: true, large_nu: true },
        GridMethod::Vnce { good_noise: false, large_nu: false },
        GridMethod::Vnce { good_noise: false, large_nu: true },
    ];
    let cells: Vec<Cell<GridMethod>> = methods
        .iter()
        .enumerate()
        .map(|(i, &m)| Cell { label: m.label(cfg.nu(), cfg.nu_large), seed: derive_seed(cfg.seed, &[tag, 1, i as u64]), key: m })
        .collect();
    let (records, alphas) = run_cells(&cells, 0, |m, seed| train_posterior(cfg, &data, *m, seed));

    let net = MeanFieldNN::default();
    let grid_header = ["z1", "z2", "density"];
    let write_grid = |out: &mut Outputs, name: &str, dens: &[f64]| {
        let rows = grid.nodes().zip(dens).map(|(z, p)| vec![fmt_f64(z[0]), fmt_f64(z[1]), fmt_f64(*p)]);
        out.csv(name, &grid_header, rows)
    };
    let mut summary = Vec::new();
    for (l, &x) in cfg.landmarks.iter().enumerate() {
        let (truth, mass) = toy_true_posterior(&model, x, &grid);
        if mass < 0.99 {
            log::warn!("landmark {l}: only {mass:.4} of the posterior mass lies inside the grid");
        }
        write_grid(out, &format!("posterior_true_l{l}.csv"), &truth)?;
        let vi = alphas[0].as_ref().map(|a| q_grid(&net, a, x, &grid).0);
        summary.push(vec![
            l.to_string(),
            fmt_f64(x[0]),
            fmt_f64(x[1]),
            "true".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            opt_f64(vi.as_ref().map(|v| grid_tv(&truth, v, grid.cell_area()))),
            "0".into(),
            fmt_f64(mass),
        ]);
        for (cell, alpha) in cells.iter().zip(&alphas) {
            let Some(alpha) = alpha else { continue };
            let (dens, q) = q_grid(&net, alpha, x, &grid);
            write_grid(out, &format!("posterior_{}_l{l}.csv", cell.label), &dens)?;
            let var: Vec<f64> = q.log_var.iter().map(|v| v.exp()).collect();
            summary.push(vec![
                l.to_string(),
                fmt_f64(x[0]),
                fmt_f64(x[1]),
                cell.label.clone(),
                fmt_f64(q.mu[0]),
                fmt_f64(q.mu[1]),
                fmt_f64(var[0]),
                fmt_f64(var[1]),
                opt_f64(vi.as_ref().map(|v| grid_tv(&dens, v, grid.cell_area()))),
                fmt_f64(grid_tv(&dens, &truth, grid.cell_area())),
                fmt_f64(dens.iter().sum::<f64>() * grid.cell_area()),
            ]);
        }
    }
    out.csv(
        "posterior_summary.csv",
        &["landmark", "x1", "x2", "method", "mu1", "mu2", "var1", "var2", "tv_vs_vi", "tv_vs_true", "grid_mass"],
        summary,
    )?;
    Ok(records)
}

// ---- Mixture-of-Gaussians population study -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MogEstimator {
    Vnce,
    Nce,
    Mle,
}

impl MogEstimator {
    pub const ALL: [MogEstimator; 3] = [MogEstimator::Vnce, MogEstimator::Nce, MogEstimator::Mle];

    pub fn name(self) -> &'static str {
        match self {
            MogEstimator::Vnce => "vnce",
            MogEstimator::Nce => "nce",
            MogEstimator::Mle => "mle",
        }
    }
}

/// Outcome of one estimator on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MogFit {
    pub theta: f64,
    /// Log-scaling estimate; absent for maximum likelihood.
    pub c: Option<f64>,
    pub objective: f64,
    pub restart: usize,
}

/// A sample from the normalised version of the unnormalised mixture,
/// `p(x) = [theta N(x; 0, theta^2) + s1 N(x; 0, s1^2)] / (theta + s1)`.
pub fn sample_unnormalised_mog(theta: f64, sigma1: f64, n: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let w = theta / (theta + sigma1);
    (0..n)
        .map(|_| {
            let s = if rng.random::<f64>() < w { theta } else { sigma1 };
            s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
        .collect()
}

/// Fits `theta` of the unnormalised mixture by one estimator, keeping the
/// best of `cfg.restarts` random starts.
pub fn fit_mog(cfg: &ExperimentConfig, estimator: MogEstimator, xs: &[f64], noise_var: f64, seed: u64) -> Result<MogFit> {
    let sigma1 = cfg.sigma1;
    let [lo, hi] = cfg.theta_init_range;
    let mut rng = rng_from(seed, &[0]);
    let inits: Vec<f64> = (0..cfg.restarts).map(|_| rng.random_range(lo.ln()..hi.ln()).exp()).collect();
    if estimator == MogEstimator::Mle {
        let (theta, v, r) = best_of_restarts(cfg.restarts, |r| {
            let (t, v) = mle_unnormalised_mog(xs, sigma1, inits[r])?;
            Ok((t, v))
        })?;
        return Ok(MogFit { theta, c: None, objective: v, restart: r });
    }
    let data = MaskedDataset::from_scalars(xs);
    let noise_model = EmpiricalGaussNoise::isotropic(1, noise_var)?;
    let m = ((cfg.nu() * xs.len() as f64).round() as usize).max(1);
    let noise = sample_noise(&noise_model, m, &mut rng_from(seed, &[1]))?;
    let prob = NceProblem::new(&data, &noise, &noise_model, 1)?;
    let base = UnnormalisedMog { sigma1 };
    let model = LogParams::new(&base, vec![true, false]);
    let opt = cfg.optimiser();
    let start = |t0: f64| vec![t0.ln(), base.log_partition(t0)];
    let (x, v, r) = match estimator {
        MogEstimator::Vnce => {
            let target = EnumeratedTarget { model: &model, q: &LogisticQuadratic, prob: &prob };
            best_of_restarts(cfg.restarts, |r| {
                let a0 = LogisticQuadraticParams::matching_mog_posterior(inits[r], sigma1).to_vec();
                let res = variational_em(&target, &start(inits[r]), &a0, &opt, ResamplePolicy::PerBlock, derive_seed(seed, &[2, r as u64]))?;
                Ok((res.theta, res.value))
            })?
        }
        MogEstimator::Nce => best_of_restarts(cfg.restarts, |r| {
            let res = nce_maximise(&Marginalised(&model), &start(inits[r]), &prob, cfg.max_iters, opt.tolerance)?;
            Ok((res.x, res.value))
        })?,
        MogEstimator::Mle => unreachable!("handled above"),
    };
    Ok(MogFit { theta: x[0].exp(), c: Some(x[1]), objective: v, restart: r })
}

#[derive(Debug, Clone, Copy)]
struct MogKey {
    run: usize,
    size_idx: usize,
    estimator: MogEstimator,
}

fn run_mog_population(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<CellRecord>> {
    let tag = cfg.experiment.tag();
    let [lo, hi] = cfg.theta_star_range;
    let truths: Vec<f64> = (0..cfg.runs)
        .map(|r| cfg.theta_star.unwrap_or_else(|| rng_from(cfg.seed, &[tag, 0, r as u64]).random_range(lo..hi)))
        .collect();
    let mut cells = Vec::new();
    for run in 0..cfg.runs {
        for (size_idx, &n) in cfg.sizes.iter().enumerate() {
            for estimator in MogEstimator::ALL {
                cells.push(Cell {
                    label: format!("{} n={n} run={run}", estimator.name()),
                    seed: derive_seed(cfg.seed, &[tag, 1, run as u64, size_idx as u64]),
                    key: MogKey { run, size_idx, estimator },
                });
            }
        }
    }
    let (records, fits) = run_cells(&cells, 0, |k, seed| {
        let theta_star = truths[k.run];
        let xs = sample_unnormalised_mog(theta_star, cfg.sigma1, cfg.sizes[k.size_idx], &mut rng_from(seed, &[0]));
        fit_mog(cfg, k.estimator, &xs, theta_star * theta_star, derive_seed(seed, &[1]))
    });
    let rows = cells.iter().zip(&fits).map(|(c, f)| {
        let k = c.key;
        vec![
            k.estimator.name().to_string(),
            cfg.sizes[k.size_idx].to_string(),
            k.run.to_string(),
            fmt_f64(truths[k.run]),
            opt_f64(f.map(|f| f.theta)),
            opt_f64(f.and_then(|f| f.c)),
            f.map(|f| f.restart.to_string()).unwrap_or_default(),
            if f.is_some() { "ok" } else { "failed" }.to_string(),
        ]
    });
    out.csv("mog_runs.csv", &["estimator", "n", "run", "theta_star", "theta_hat", "c_hat", "restart", "status"], rows)?;
    let mut summary = Vec::new();
    for estimator in MogEstimator::ALL {
        for (size_idx, &n) in cfg.sizes.iter().enumerate() {
            let sel: Vec<(&Cell<MogKey>, &Option<MogFit>)> =
                cells.iter().zip(&fits).filter(|(c, _)| c.key.estimator == estimator && c.key.size_idx == size_idx).collect();
            let se: Vec<f64> = sel.iter().filter_map(|(c, f)| f.map(|f| (f.theta - truths[c.key.run]).powi(2))).collect();
            let failed = sel.len() - se.len();
            if failed > 0 {
                log::warn!("{} n={n}: {failed} runs failed and are excluded", estimator.name());
            }
            let s = summarise(&se, 0.1, 0.9);
            summary.push(vec![
                estimator.name().to_string(),
                n.to_string(),
                se.len().to_string(),
                failed.to_string(),
                opt_f64(s.map(|s| s.0)),
                opt_f64(s.map(|s| s.1)),
                opt_f64(s.map(|s| s.2)),
            ]);
        }
    }
    out.csv("mog_summary.csv", &["estimator", "n", "ok", "failed", "median_mse", "mse_p10", "mse_p90"], summary)?;
    Ok(records)
}

// ---- Graph recovery from incomplete data ------------------------------------------------

/// A ground-truth precision matrix with a complete Gibbs sample from it.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub k: DMatrix<f64>,
    pub data: MaskedDataset,
}

pub fn make_graph_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<GraphDataset> {
    let params = build_ground_truth_precision(cfg.d, cfg.graph, &mut rng_from(seed, &[0]))?;
    let gibbs = GibbsConfig { burnin: cfg.gibbs_burnin, thin: cfg.gibbs_thin, seed: derive_seed(seed, &[1]) };
    let data = gibbs_truncmvn(&params, cfg.n, gibbs)?;
    Ok(GraphDataset { k: params.k, data })
}

/// Starting point shared by VNCE and NCE: `K0 = diag(1 / E[x_j^2])` over the
/// observed cells and the `c0` that centres the log-ratio on the data.
fn graph_theta0<N: NoiseModel>(data: &MaskedDataset, noise: &N) -> Result<Vec<f64>> {
    let d = data.dim();
    let model = TruncGaussModel { d };
    let mut theta = vec![0.0; model.n_k_params() + 1];
    let mut k0 = DMatrix::zeros(d, d);
    for j in 0..d {
        let col = data.column_observed(j);
        let m2 = col.iter().map(|v| v * v).sum::<f64>() / col.len().max(1) as f64;
        k0[(j, j)] = if m2 > 0.0 { 1.0 / m2 } else { 1.0 };
    }
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            theta[idx] = k0[(i, j)];
            idx += 1;
        }
    }
    let imputed = data.mean_imputed()?;
    let c0 = imputed
        .rows()
        .map(|r| crate::models::MarginalModel::log_phi_marginal(&model, &theta, r.values) - noise.log_density(r.values))
        .sum::<f64>()
        / data.n_rows() as f64;
    theta[idx] = c0;
    Ok(theta)
}

/// Estimated `K` from one method on one masked dataset.
pub fn estimate_graph(cfg: &ExperimentConfig, method: GraphMethod, step: Option<f64>, data: &MaskedDataset, seed: u64) -> Result<DMatrix<f64>> {
    let d = data.dim();
    let model = TruncGaussModel { d };
    let nu = cfg.nu() as usize;
    let (noise_model, capped) = fit_factorised_truncnorm_lenient(data)?;
    if !capped.is_empty() {
        log::debug!("noise fit capped for columns {capped:?}");
    }
    match method {
        GraphMethod::Vnce => {
            let noise = sample_noise_matched(&noise_model, data, nu, &mut rng_from(seed, &[0]))?;
            let prob = NceProblem::new(data, &noise, &noise_model, cfg.latent_samples)?;
            let family = JointLognormal { d, diagonal: false };
            let target = ReparamTarget { model: &model, family: &family, prob: &prob };
            let theta0 = graph_theta0(data, &noise_model)?;
            let alpha0 = family.moment_init(data);
            let res = variational_em(&target, &theta0, &alpha0, &cfg.optimiser(), ResamplePolicy::PerBlock, derive_seed(seed, &[1]))?;
            Ok(unpack_symmetric(d, &res.theta))
        }
        GraphMethod::NceImputed => {
            let imputed = data.mean_imputed()?;
            let noise = sample_noise_matched(&noise_model, &imputed, nu, &mut rng_from(seed, &[0]))?;
            let prob = NceProblem::new(&imputed, &noise, &noise_model, 1)?;
            let theta0 = graph_theta0(data, &noise_model)?;
            let res = nce_maximise(&model, &theta0, &prob, cfg.max_iters, cfg.optimiser().tolerance)?;
            Ok(unpack_symmetric(d, &res.x))
        }
        GraphMethod::McMle => {
            let step = step.ok_or_else(|| Error::Config("MC-MLE needs a step size".into()))?;
            let mc = McMleConfig {
                epochs: cfg.mc_mle_epochs,
                minibatch: cfg.minibatch,
                latent_samples: cfg.latent_samples,
                ..McMleConfig::new(step, derive_seed(seed, &[2]))
            };
            let r = mc_mle_sga(data, &DMatrix::identity(d, d), &mc)?;
            if let Some(why) = r.aborted {
                return Err(Error::NonFinite(format!("MC-MLE stopped early: {why}")));
            }
            Ok(r.k)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GraphKey {
    dataset: usize,
    frac_idx: usize,
    method: GraphMethod,
    step: Option<f64>,
}

fn pct(p: f64) -> String {
    format!("{:02}", (p * 100.0).round() as i64)
}

fn run_graph_missing(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Vec<CellRecord>> {
    let tag = cfg.experiment.tag();
    let gen = map_indexed(cfg.datasets, |ds| make_graph_dataset(cfg, derive_seed(cfg.seed, &[tag, 0, ds as u64])));
    let mut records = Vec::new();
    let mut datasets = Vec::with_capacity(cfg.datasets);
    for (ds, g) in gen.into_iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[tag, 0, ds as u64]);
        match g {
            Ok(g) => {
                records.push(CellRecord { index: records.len(), label: format!("dataset {ds}"), seed, ok: true, error: None, wall_seconds: 0.0 });
                datasets.push(Some(g));
            }
            Err(e) => {
                log::warn!("dataset {ds} failed: {e}");
                records.push(CellRecord { index: records.len(), label: format!("dataset {ds}"), seed, ok: false, error: Some(e.to_string()), wall_seconds: 0.0 });
                datasets.push(None);
            }
        }
    }
    // masked copies, one per (dataset, fraction)
    let mut masked: Vec<Vec<Option<MaskedDataset>>> = Vec::new();
    for (ds, g) in datasets.iter().enumerate() {
        let mut row = Vec::new();
        for (fi, &p) in cfg.fractions.iter().enumerate() {
            let m = g.as_ref().map(|g| inject_missingness(&g.data, p, &mut rng_from(cfg.seed, &[tag, 1, ds as u64, fi as u64])));
            row.push(match m {
                Some(Ok(m)) => Some(m),
                Some(Err(e)) => {
                    log::warn!("masking dataset {ds} at {p} failed: {e}");
                    None
                }
                None => None,
            });
        }
        masked.push(row);
    }
    if cfg.save_artifacts {
        for (ds, g) in datasets.iter().enumerate() {
            let Some(g) = g else { continue };
            out.matrix(&format!("truth/K_ds{ds}.csv"), &g.k)?;
            for (fi, &p) in cfg.fractions.iter().enumerate() {
                if let Some(m) = &masked[ds][fi] {
                    let sidecar = DatasetSidecar {
                        seed: cfg.seed,
                        kind: cfg.graph,
                        missing_fraction: p,
                        k: (0..cfg.d).map(|i| (0..cfg.d).map(|j| g.k[(i, j)]).collect()).collect(),
                    };
                    let stem = format!("ds{ds}_p{}", pct(p));
                    for path in save_dataset(&out.dir.join("data"), &stem, m, &sidecar)? {
                        out.files.push(path.strip_prefix(&out.dir).unwrap_or(&path).display().to_string());
                    }
                }
            }
        }
    }

    let mut cells = Vec::new();
    for ds in 0..cfg.datasets {
        for fi in 0..cfg.fractions.len() {
            for &method in &cfg.methods {
                let steps: Vec<Option<f64>> =
                    if method == GraphMethod::McMle { cfg.mc_mle_step_sizes.iter().map(|s| Some(*s)).collect() } else { vec![None] };
                for step in steps {
                    let step_label = step.map(|s| format!(" step={s}")).unwrap_or_default();
                    cells.push(Cell {
                        label: format!("{} ds={ds} p={}{step_label}", method.name(), cfg.fractions[fi]),
                        // VNCE and NCE share the noise stream of their (dataset, fraction)
                        seed: derive_seed(cfg.seed, &[tag, 2, ds as u64, fi as u64]),
                        key: GraphKey { dataset: ds, frac_idx: fi, method, step },
                    });
                }
            }
        }
    }
    let offset = records.len();
    let (cell_records, results) = run_cells(&cells, offset, |k, seed| {
        let data = masked[k.dataset][k.frac_idx]
            .as_ref()
            .ok_or_else(|| Error::Domain("input dataset is unavailable".into()))?;
        let truth = &datasets[k.dataset].as_ref().expect("masked implies generated").k;
        let est = estimate_graph(cfg, k.method, k.step, data, seed)?;
        let roc = roc_auc(&est, truth)?;
        Ok((est, roc))
    });
    records.extend(cell_records);

    let mut rows = Vec::new();
    for (c, r) in cells.iter().zip(&results) {
        let k = c.key;
        let p = cfg.fractions[k.frac_idx];
        rows.push(vec![
            k.dataset.to_string(),
            fmt_f64(p),
            k.method.name().to_string(),
            opt_f64(k.step),
            opt_f64(r.as_ref().map(|r| r.1.auc)),
            if r.is_some() { "ok" } else { "failed" }.to_string(),
        ]);
        if let (Some((est, roc)), true) = (r, cfg.save_artifacts) {
            let step = k.step.map(|s| format!("_s{s}")).unwrap_or_default();
            let stem = format!("{}{step}_ds{}_p{}", k.method.name(), k.dataset, pct(p));
            out.matrix(&format!("estimates/K_{stem}.csv"), est)?;
            let roc_rows = (0..roc.thresholds.len()).map(|t| vec![fmt_f64(roc.thresholds[t]), fmt_f64(roc.fpr[t]), fmt_f64(roc.tpr[t])]);
            out.csv(&format!("roc/{stem}.csv"), &["threshold", "fpr", "tpr"], roc_rows)?;
        }
    }
    out.csv("graph_cells.csv", &["dataset", "fraction", "method", "step_size", "auc", "status"], rows)?;

    let mut summary = Vec::new();
    for (fi, &p) in cfg.fractions.iter().enumerate() {
        let mut variants: Vec<(GraphMethod, Option<f64>)> = Vec::new();
        for c in &cells {
            let v = (c.key.method, c.key.step);
            if c.key.frac_idx == fi && !variants.contains(&v) {
                variants.push(v);
            }
        }
        for (method, step) in variants {
            let aucs: Vec<f64> = cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.key.frac_idx == fi && c.key.method == method && c.key.step == step)
                .filter_map(|(_, r)| r.as_ref().map(|r| r.1.auc))
                .collect();
            let s = summarise(&aucs, 0.25, 0.75);
            summary.push(vec![
                fmt_f64(p),
                method.name().to_string(),
                opt_f64(step),
                aucs.len().to_string(),
                opt_f64(s.map(|s| s.0)),
                opt_f64(s.map(|s| s.1)),
                opt_f64(s.map(|s| s.2)),
            ]);
        }
    }
    out.csv("graph_summary.csv", &["fraction", "method", "step_size", "ok", "median_auc", "q25_auc", "q75_auc"], summary)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(d: usize) -> DMatrix<f64> {
        let mut k = DMatrix::identity(d, d) * 2.0;
        for i in 0..d {
            let j = (i + 1) % d;
            k[(i, j)] = 0.4;
            k[(j, i)] = 0.4;
        }
        k
    }

    #[test]
    fn perfect_estimate_has_unit_auc() {
        let k = ring(6);
        let r = roc_auc(&k, &k).unwrap();
        assert_eq!(r.auc, 1.0);
        assert!(r.tpr.windows(2).all(|w| w[1] >= w[0]) && r.fpr.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!((r.fpr[0], r.tpr[0]), (0.0, 0.0));
        assert_eq!((*r.fpr.last().unwrap(), *r.tpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn constant_scores_give_the_diagonal() {
        let est = DMatrix::from_element(6, 6, 0.7);
        let r = roc_auc(&est, &ring(6)).unwrap();
        assert_eq!(r.fpr, vec![0.0, 1.0, 1.0]);
        assert_eq!(r.tpr, vec![0.0, 1.0, 1.0]);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn negated_scores_give_zero_auc() {
        let truth = ring(7);
        let mut rng = rng_from(1, &[]);
        let jitter = DMatrix::from_fn(7, 7, |_, _| 1e-3 * rng.random::<f64>());
        let est = -&truth + (&jitter + jitter.transpose());
        let r = roc_auc(&est, &truth).unwrap();
        assert!(r.auc < 1e-12, "{}", r.auc);
        // magnitudes alone would rank perfectly, so the sign matters
        assert_eq!(roc_auc(&est.abs(), &truth).unwrap().auc, 1.0);
    }

    #[test]
    fn undefined_auc_is_an_error() {
        let empty = DMatrix::identity(4, 4);
        assert!(roc_auc(&empty, &empty).is_err());
        let full = DMatrix::from_element(4, 4, 1.0);
        assert!(roc_auc(&full, &full).is_err());
    }

    #[test]
    fn config_requires_experiment_and_seed() {
        assert!(ExperimentConfig::from_toml_str("seed = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("experiment = \"graph_missing\"").is_err());
        // MC-MLE is a default method and its step sizes have no default
        assert!(ExperimentConfig::from_toml_str("experiment = \"graph_missing\"\nseed = 3").is_err());
        let c = ExperimentConfig::from_toml_str("experiment = \"graph_missing\"\nseed = 3\nmc_mle_step_sizes = [0.01]").unwrap();
        assert_eq!((c.experiment, c.seed, c.nu()), (ExperimentKind::GraphMissing, 3, 10.0));
        assert!(ExperimentConfig::from_toml_str("experiment = \"graph_missing\"\nseed = 3\nbogus = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("experiment = \"graph_missing\"\nseed = 3\nnu = 2.5").is_err());
        assert!(ExperimentConfig::from_toml_str("experiment = \"graph_missing\"\nseed = 3\nfractions = [0.7]").is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig { experiment: ExperimentKind::MogPopulation, seed: 9, theta_star: Some(3.0), ..Default::default() };
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn paper_scale_restores_full_size() {
        let mut c = ExperimentConfig::default();
        c.apply_paper_scale();
        assert_eq!((c.d, c.n, c.runs), (20, 1000, 500));
    }

    #[test]
    fn true_posterior_is_normalised_and_symmetric() {
        let grid = LatentGrid { points: 81, half_width: 4.0 };
        let (dens, mass) = toy_true_posterior(&ToyModel::default(), [0.8, 1.1], &grid);
        assert!((dens.iter().sum::<f64>() * grid.cell_area() - 1.0).abs() < 1e-3);
        assert!(mass > 0.99);
        let p = grid.points;
        for a in 0..p {
            for b in 0..p {
                let (x, y) = (dens[a * p + b], dens[(p - 1 - a) * p + (p - 1 - b)]);
                assert!((x - y).abs() <= 1e-12 * x.max(y).max(1e-300));
            }
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let model = ToyModel::default();
        let net = MeanFieldNN { input: 2, hidden: 4, latent: 2 };
        let mut rng = rng_from(3, &[]);
        let alpha = net.init(&mut rng);
        let rows: Vec<Vec<f64>> = (0..7).map(|_| model.sample(&mut rng).0.to_vec()).collect();
        let batch = MaskedDataset::from_rows(&rows).unwrap();
        let elbo = |a: &[f64]| {
            let q = net.prepare(a, &batch).unwrap();
            let mut total = 0.0;
            for i in 0..batch.n_rows() {
                let mut r = rng_from(11, &[i as u64]);
                let eps: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut r)).collect();
                for s in 0..3 {
                    let mut z = [0.0; 2];
                    let lq = q.sample(i, &eps[2 * s..2 * s + 2], &mut z);
                    let x = batch.row(i).values;
                    total += model.log_joint([x[0], x[1]], z) - lq;
                }
            }
            total / (3 * batch.n_rows()) as f64
        };
        let g = elbo_gradient(&model, &net, &alpha, &batch, 3, 11).unwrap();
        let h = 1e-6;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in (0..alpha.len()).step_by(3) {
            let mut up = alpha.clone();
            let mut dn = alpha.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (elbo(&up) - elbo(&dn)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * scale, "weight {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn adam_climbs_a_concave_bowl() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
            adam.ascend(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn mog_sampler_matches_mixture_variance() {
        let (theta, s1) = (3.0, 1.0);
        let xs = sample_unnormalised_mog(theta, s1, 200_000, &mut rng_from(5, &[]));
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let want = (theta * theta * theta + s1 * s1 * s1) / (theta + s1);
        assert!((var - want).abs() < 0.05 * want, "{var} vs {want}");
    }
}
