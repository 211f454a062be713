use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `n x d` observations with a per-cell observed flag.
///
/// Masked-out cells hold `NaN` so that an estimator that accidentally reads
/// them poisons its own output instead of silently using stale numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDataset {
    n: usize,
    d: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    /// Fraction of cells that were removed when the mask was drawn.
    pub missing_fraction: f64,
}

/// One row of a [`MaskedDataset`].
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub values: &'a [f64],
    pub mask: &'a [bool],
}

impl RowView<'_> {
    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn n_missing(&self) -> usize {
        self.mask.len() - self.n_observed()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

impl MaskedDataset {
    /// Fully observed dataset.
    pub fn complete(n: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: values.len() });
        }
        Ok(Self { n, d, values, mask: vec![true; n * d], missing_fraction: 0.0 })
    }

    /// Single-column dataset from scalars.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Self {
            n: xs.len(),
            d: 1,
            values: xs.to_vec(),
            mask: vec![true; xs.len()],
            missing_fraction: 0.0,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: r.len() });
            }
            values.extend_from_slice(r);
        }
        Self::complete(rows.len(), d, values)
    }

    pub fn with_mask(n: usize, d: usize, mut values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: values.len() });
        }
        if mask.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: mask.len() });
        }
        let missing = mask.iter().filter(|&&m| !m).count();
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = f64::NAN;
            }
        }
        let missing_fraction = if n * d == 0 { 0.0 } else { missing as f64 / (n * d) as f64 };
        Ok(Self { n, d, values, mask, missing_fraction })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> RowView<'_> {
        let r = i * self.d..(i + 1) * self.d;
        RowView { values: &self.values[r.clone()], mask: &self.mask[r] }
    }

    pub fn rows(&self) -> impl Iterator<Item = RowView<'_>> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.d + j;
        self.mask[k].then(|| self.values[k])
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn n_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Observed values of column `j`.
    pub fn column_observed(&self, j: usize) -> Vec<f64> {
        (0..self.n).filter_map(|i| self.get(i, j)).collect()
    }

    /// Distinct missingness patterns, each with the rows that carry it, in a
    /// deterministic order.
    pub fn mask_groups(&self) -> BTreeMap<Vec<bool>, Vec<usize>> {
        let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n {
            groups.entry(self.row(i).mask.to_vec()).or_default().push(i);
        }
        groups
    }

    /// Fills every missing cell with the mean of the observed cells of its
    /// column.
    pub fn mean_imputed(&self) -> Result<MaskedDataset> {
        let means = (0..self.d)
            .map(|j| {
                let col = self.column_observed(j);
                if col.is_empty() {
                    Err(Error::Domain(format!("column {j} has no observed values")))
                } else {
                    Ok(col.iter().sum::<f64>() / col.len() as f64)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let values = (0..self.n * self.d)
            .map(|k| if self.mask[k] { self.values[k] } else { means[k % self.d] })
            .collect();
        MaskedDataset::complete(self.n, self.d, values)
    }

    /// New dataset holding the given rows in order.
    pub fn subset(&self, rows: &[usize]) -> MaskedDataset {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        let mut mask = Vec::with_capacity(rows.len() * self.d);
        for &i in rows {
            let r = self.row(i);
            values.extend_from_slice(r.values);
            mask.extend_from_slice(r.mask);
        }
        let missing = mask.iter().filter(|&&m| !m).count();
        let cells = rows.len() * self.d;
        MaskedDataset {
            n: rows.len(),
            d: self.d,
            values,
            mask,
            missing_fraction: if cells == 0 { 0.0 } else { missing as f64 / cells as f64 },
        }
    }
}
