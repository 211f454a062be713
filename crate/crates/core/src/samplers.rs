//! Ground-truth data: Gibbs sampling of truncated Gaussians, ring and hub
//! precision matrices, and MCAR missingness.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::MaskedDataset;
use crate::error::{Error, Result};
use crate::models::{truncgauss_conditional, TruncGaussParams};
use crate::noise::sample_unit_truncnorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
}

impl GibbsConfig {
    pub fn new(seed: u64) -> Self {
        Self { burnin: 100, thin: 10, seed }
    }
}

/// `n` draws from the truncated Gaussian `exp(-u'Ku/2)` on `[0, inf)^d` by
/// coordinate-wise Gibbs sampling, started at the all-ones vector.
///
/// After `burnin` sweeps every `thin`-th sweep is kept.
pub fn gibbs_truncmvn(params: &TruncGaussParams, n: usize, cfg: GibbsConfig) -> Result<MaskedDataset> {
    if cfg.thin == 0 {
        return Err(Error::Config("thinning factor must be at least 1".into()));
    }
    let k = &params.k;
    let d = k.nrows();
    if nalgebra::Cholesky::new(k.clone()).is_none() {
        return Err(Error::Domain("Gibbs sampler needs a positive definite precision matrix".into()));
    }
    let mut rng = crate::rng::rng_from(cfg.seed, &[]);
    let mut u = vec![1.0; d];
    let sweep = |u: &mut Vec<f64>, rng: &mut crate::rng::Rng| -> Result<()> {
        for i in 0..d {
            let (mu, s) = truncgauss_conditional(k, i, u)?;
            u[i] = (mu + s * sample_unit_truncnorm(-mu / s, rng)).max(0.0);
        }
        Ok(())
    };
    for _ in 0..cfg.burnin {
        sweep(&mut u, &mut rng)?;
    }
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n {
        for _ in 0..cfg.thin {
            sweep(&mut u, &mut rng)?;
        }
        values.extend_from_slice(&u);
    }
    MaskedDataset::complete(n, d, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Ring,
    Hub,
}

impl std::str::FromStr for GraphKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(GraphKind::Ring),
            "hub" => Ok(GraphKind::Hub),
            other => Err(Error::Config(format!("unknown graph kind '{other}' (ring|hub)"))),
        }
    }
}

fn edge_weight<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.3..0.5)
}

/// Sparse positive precision matrix with a ring (and optionally hub) edge
/// structure; diagonal `1 + max_i sum_{j != i} |K_ij|`. `c` is set to 0.
pub fn build_ground_truth_precision<R: Rng + ?Sized>(d: usize, kind: GraphKind, rng: &mut R) -> Result<TruncGaussParams> {
    if d < 3 {
        return Err(Error::Domain(format!("ring graph needs d >= 3, got {d}")));
    }
    let mut k = DMatrix::zeros(d, d);
    let set = |k: &mut DMatrix<f64>, i: usize, j: usize, w: f64| {
        k[(i, j)] = w;
        k[(j, i)] = w;
    };
    for i in 0..d - 1 {
        let w = edge_weight(rng);
        set(&mut k, i, i + 1, w);
    }
    let w = edge_weight(rng);
    set(&mut k, 0, d - 1, w);
    if kind == GraphKind::Hub {
        let n_hubs = d.div_ceil(10);
        let n_links = d.div_ceil(4);
        for hub in sample_indices(rng, d, n_hubs).into_vec() {
            let others: Vec<usize> = (0..d).filter(|&j| j != hub).collect();
            for t in sample_indices(rng, others.len(), n_links).into_vec() {
                let w = edge_weight(rng);
                set(&mut k, hub, others[t], w);
            }
        }
    }
    let max_row = (0..d)
        .map(|i| (0..d).filter(|&j| j != i).map(|j| k[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    for i in 0..d {
        k[(i, i)] = 1.0 + max_row;
    }
    TruncGaussParams::new(k, 0.0)
}

/// Upper-triangle pairs `(i, j)`, `i < j`, with a non-zero entry.
pub fn edges(k: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let d = k.nrows();
    (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).filter(|&(i, j)| k[(i, j)] != 0.0).collect()
}

const MASK_REDRAWS: usize = 10_000;

/// Masks exactly `floor(p n d)` cells chosen uniformly without replacement,
/// redrawing until no row is fully masked.
pub fn inject_missingness<R: Rng + ?Sized>(data: &MaskedDataset, p: f64, rng: &mut R) -> Result<MaskedDataset> {
    if !(0.0..=0.5).contains(&p) {
        return Err(Error::Domain(format!("missing fraction must lie in [0, 0.5], got {p}")));
    }
    let (n, d) = (data.n_rows(), data.dim());
    let cells = n * d;
    let count = (p * cells as f64 + 1e-9).floor() as usize;
    for _ in 0..MASK_REDRAWS {
        let mut mask = vec![true; cells];
        for c in sample_indices(rng, cells, count).into_vec() {
            mask[c] = false;
        }
        if mask.chunks(d.max(1)).all(|r| r.iter().any(|&m| m)) || d == 0 {
            return MaskedDataset::with_mask(n, d, data.values().to_vec(), mask);
        }
    }
    Err(Error::Domain(format!("could not draw a mask without empty rows after {MASK_REDRAWS} attempts")))
}

/// Provenance stored next to a persisted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub seed: u64,
    pub kind: GraphKind,
    pub missing_fraction: f64,
    pub k: Vec<Vec<f64>>,
}

pub(crate) fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes `<stem>_values.csv`, `<stem>_mask.csv` and `<stem>.json` into
/// `dir`. Masked values are written as empty fields.
pub fn save_dataset(dir: &Path, stem: &str, data: &MaskedDataset, sidecar: &DatasetSidecar) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(dir)?;
    let d = data.dim();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let values_path = dir.join(format!("{stem}_values.csv"));
    let mut w = csv::Writer::from_path(&values_path)?;
    w.write_record(&header)?;
    for r in data.rows() {
        w.write_record(r.values.iter().map(|v| fmt_f64(*v)))?;
    }
    w.flush()?;
    let mask_path = dir.join(format!("{stem}_mask.csv"));
    let mut w = csv::Writer::from_path(&mask_path)?;
    w.write_record(&header)?;
    for r in data.rows() {
        w.write_record(r.mask.iter().map(|&m| if m { "1" } else { "0" }))?;
    }
    w.flush()?;
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(sidecar)?)?;
    Ok([values_path, mask_path, json_path])
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path, stem: &str) -> Result<(MaskedDataset, DatasetSidecar)> {
    let read = |path: PathBuf| -> Result<Vec<Vec<String>>> {
        let mut r = csv::Reader::from_path(path)?;
        r.records().map(|rec| Ok(rec?.iter().map(str::to_owned).collect())).collect()
    };
    let vals = read(dir.join(format!("{stem}_values.csv")))?;
    let masks = read(dir.join(format!("{stem}_mask.csv")))?;
    if vals.len() != masks.len() {
        return Err(Error::DimensionMismatch { expected: vals.len(), got: masks.len() });
    }
    let d = vals.first().map_or(0, Vec::len);
    let mut values = Vec::with_capacity(vals.len() * d);
    let mut mask = Vec::with_capacity(vals.len() * d);
    for (vr, mr) in vals.iter().zip(&masks) {
        for (v, m) in vr.iter().zip(mr) {
            let observed = m == "1";
            mask.push(observed);
            values.push(if observed {
                v.parse().map_err(|_| Error::Domain(format!("bad value '{v}'")))?
            } else {
                f64::NAN
            });
        }
    }
    let ds = MaskedDataset::with_mask(vals.len(), d, values, mask)?;
    let sidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    Ok((ds, sidecar))
}
