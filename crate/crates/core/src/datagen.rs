//! Synthetic sparse-loading binary datasets.
//!
//! Latent scores `A` (one row per observation, per-component Gaussian with
//! configurable variances) are combined with a sparse block loading matrix
//! `B`; entries are then drawn entrywise as Bernoulli of the sigmoid of
//! `A B^T`. All draws come from one ChaCha12 stream seeded by the config:
//! first `A` in row-major order, then the Bernoulli uniforms in row-major
//! order, so a seed pins the dataset bytes exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Mat;
use crate::rng::rng_from_seed;

/// File format version written into dataset metadata.
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataGenError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension {d} too small for the block loading pattern (need at least {need})")]
    LoadingPattern { d: usize, need: usize },
    #[error("non-binary entry `{value}` at row {row}, column {col}")]
    NonBinaryEntry {
        row: usize,
        col: usize,
        value: String,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} has {got} columns, expected {expected}")]
    RowWidth {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("data has {got} rows, metadata says {expected}")]
    RowCount { got: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Configuration for one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Number of observations.
    pub n: usize,
    /// Observed dimension.
    pub d: usize,
    /// Latent rank of the generating model.
    pub k: usize,
    /// Per-latent-component Gaussian variances, length `k`.
    pub variances: Vec<f64>,
    /// Seed for the ChaCha12 stream.
    pub seed: u64,
}

impl GenConfig {
    /// Config with the default variances (0.09, 0.25) for `k <= 2`.
    pub fn new(n: usize, d: usize, k: usize, seed: u64) -> Result<Self, DataGenError> {
        let cfg = Self {
            n,
            d,
            k,
            variances: default_variances(k)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DataGenError> {
        if self.n == 0 {
            return Err(DataGenError::InvalidConfig("n must be at least 1".into()));
        }
        if self.d == 0 {
            return Err(DataGenError::InvalidConfig("d must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(DataGenError::InvalidConfig("k must be at least 1".into()));
        }
        if self.variances.len() != self.k {
            return Err(DataGenError::InvalidConfig(format!(
                "need {} variances, got {}",
                self.k,
                self.variances.len()
            )));
        }
        if self.variances.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(DataGenError::InvalidConfig(
                "variances must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// Default component variances: 0.09 for the first component, 0.25 for the second.
pub fn default_variances(k: usize) -> Result<Vec<f64>, DataGenError> {
    const DEFAULTS: [f64; 2] = [0.09, 0.25];
    if k == 0 || k > DEFAULTS.len() {
        return Err(DataGenError::InvalidConfig(format!(
            "no default variances for k = {k}; pass them explicitly"
        )));
    }
    Ok(DEFAULTS[..k].to_vec())
}

/// An N x d matrix of {0,1} observations, bit-packed by row.
#[derive(Debug, Clone)]
pub struct BinaryDataset {
    bits: Vec<u64>,
    words_per_row: usize,
    n: usize,
    d: usize,
    pub config: GenConfig,
    /// Generation probabilities, kept only when diagnostics are requested.
    pub pi: Option<Vec<f64>>,
}

impl BinaryDataset {
    fn empty(n: usize, d: usize, config: GenConfig) -> Self {
        let words_per_row = d.div_ceil(64);
        Self {
            bits: vec![0; n * words_per_row],
            words_per_row,
            n,
            d,
            config,
            pi: None,
        }
    }

    /// Builds a dataset from explicit rows, rejecting anything outside {0, 1}.
    pub fn from_rows(rows: &[Vec<f64>], config: GenConfig) -> Result<Self, DataGenError> {
        if rows.is_empty() {
            return Err(DataGenError::InvalidConfig("no rows".into()));
        }
        let d = rows[0].len();
        let mut ds = Self::empty(rows.len(), d, config);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(DataGenError::RowWidth {
                    row: i,
                    got: row.len(),
                    expected: d,
                });
            }
            for (j, &v) in row.iter().enumerate() {
                if v == 1.0 {
                    ds.set(i, j);
                } else if v != 0.0 {
                    return Err(DataGenError::NonBinaryEntry {
                        row: i,
                        col: j,
                        value: format!("{v}"),
                    });
                }
            }
        }
        Ok(ds)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words_per_row + j / 64] |= 1u64 << (j % 64);
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.n && j < self.d);
        self.bits[i * self.words_per_row + j / 64] >> (j % 64) & 1 == 1
    }

    /// Packed words of row `i`.
    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// Writes row `i` into `out` as {0.0, 1.0} values.
    pub fn fill_row_f64(&self, i: usize, out: &mut [f64]) {
        assert_eq!(out.len(), self.d);
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = if self.get(i, j) { 1.0 } else { 0.0 };
        }
    }

    /// Materializes the selected rows as a dense {0,1} matrix.
    pub fn rows_as_mat(&self, indices: &[usize]) -> Mat {
        let mut m = Mat::zeros(indices.len(), self.d);
        for (r, &i) in indices.iter().enumerate() {
            self.fill_row_f64(i, m.row_mut(r));
        }
        m
    }

    /// Per-column counts of ones.
    pub fn column_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.d];
        for i in 0..self.n {
            let words = self.row_words(i);
            for (j, count) in counts.iter_mut().enumerate() {
                *count += words[j / 64] >> (j % 64) & 1;
            }
        }
        counts
    }

    /// Column-major bitsets (`d` bitsets of `n` bits each), for popcount Gram products.
    pub fn column_bitsets(&self) -> Vec<Vec<u64>> {
        let words_per_col = self.n.div_ceil(64);
        let mut cols = vec![vec![0u64; words_per_col]; self.d];
        for i in 0..self.n {
            let words = self.row_words(i);
            for (j, col) in cols.iter_mut().enumerate() {
                let bit = words[j / 64] >> (j % 64) & 1;
                col[i / 64] |= bit << (i % 64);
            }
        }
        cols
    }

    /// New dataset containing the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(indices.len(), self.d, self.config.clone());
        for (r, &i) in indices.iter().enumerate() {
            let src = i * self.words_per_row;
            let dst = r * out.words_per_row;
            out.bits[dst..dst + self.words_per_row]
                .copy_from_slice(&self.bits[src..src + self.words_per_row]);
        }
        out.pi = self.pi.as_ref().map(|pi| {
            let mut sub = Vec::with_capacity(indices.len() * self.d);
            for &i in indices {
                sub.extend_from_slice(&pi[i * self.d..(i + 1) * self.d]);
            }
            sub
        });
        out
    }

    /// Writes `<prefix>.json` (metadata) and `<prefix>.csv` (0/1 body).
    pub fn write_files(&self, path: &Path) -> Result<(), DataGenError> {
        let prefix = strip_dataset_extension(path);
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            n: self.n,
            d: self.d,
            seed: self.config.seed,
            config: self.config.clone(),
        };
        fs::write(
            prefix.with_extension("json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        let file = fs::File::create(prefix.with_extension("csv"))?;
        let mut w = BufWriter::new(file);
        let mut line = String::with_capacity(2 * self.d);
        for i in 0..self.n {
            line.clear();
            for j in 0..self.d {
                if j > 0 {
                    line.push(',');
                }
                line.push(if self.get(i, j) { '1' } else { '0' });
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`write_files`](Self::write_files).
    ///
    /// `path` may be the prefix or either of the two files.
    pub fn read_files(path: &Path) -> Result<Self, DataGenError> {
        let prefix = strip_dataset_extension(path);
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(prefix.with_extension("json"))?)?;
        let body = fs::read_to_string(prefix.with_extension("csv"))?;
        let mut ds = Self::empty(meta.n, meta.d, meta.config);
        let mut rows = 0usize;
        for (i, line) in body.lines().enumerate() {
            if i >= meta.n {
                return Err(DataGenError::RowCount {
                    got: i + 1,
                    expected: meta.n,
                });
            }
            let mut cols = 0usize;
            for (j, tok) in line.split(',').enumerate() {
                if j >= meta.d {
                    return Err(DataGenError::RowWidth {
                        row: i,
                        got: j + 1,
                        expected: meta.d,
                    });
                }
                match tok.trim() {
                    "0" => {}
                    "1" => ds.set(i, j),
                    other => {
                        return Err(DataGenError::NonBinaryEntry {
                            row: i,
                            col: j,
                            value: other.to_string(),
                        })
                    }
                }
                cols += 1;
            }
            if cols != meta.d {
                return Err(DataGenError::RowWidth {
                    row: i,
                    got: cols,
                    expected: meta.d,
                });
            }
            rows += 1;
        }
        if rows != meta.n {
            return Err(DataGenError::RowCount {
                got: rows,
                expected: meta.n,
            });
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format_version: u32,
    n: usize,
    d: usize,
    seed: u64,
    config: GenConfig,
}

fn strip_dataset_extension(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("csv") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

/// Sparse block loading matrix: column `c` is one on rows `20c..20(c+1)`, zero elsewhere.
pub fn make_loadings(d: usize, k: usize) -> Result<Mat, DataGenError> {
    if k == 0 {
        return Err(DataGenError::InvalidConfig("k must be at least 1".into()));
    }
    if d < 20 * k {
        return Err(DataGenError::LoadingPattern { d, need: 20 * k });
    }
    let mut b = Mat::zeros(d, k);
    for c in 0..k {
        for j in 20 * c..20 * (c + 1) {
            b.set(j, c, 1.0);
        }
    }
    Ok(b)
}

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pi = sigmoid(A B^T), entrywise; all entries land strictly inside (0, 1).
pub fn build_probability_matrix(a: &Mat, b: &Mat) -> Result<Mat, DataGenError> {
    if a.cols() != b.cols() {
        return Err(DataGenError::Shape(format!(
            "A has {} columns, B has {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut pi = a.matmul_nt(b);
    for v in pi.as_mut_slice() {
        *v = sigmoid(*v);
    }
    Ok(pi)
}

/// Draws a dataset from the latent model; deterministic given the config seed.
pub fn generate_dataset(config: &GenConfig) -> Result<BinaryDataset, DataGenError> {
    generate_dataset_with_diagnostics(config, false)
}

/// As [`generate_dataset`], optionally retaining the probability matrix
/// (an N x d fp64 buffer) for diagnostics.
pub fn generate_dataset_with_diagnostics(
    config: &GenConfig,
    retain_pi: bool,
) -> Result<BinaryDataset, DataGenError> {
    config.validate()?;
    let b = make_loadings(config.d, config.k)?;
    let mut rng = rng_from_seed(config.seed);

    // Latent scores, row-major.
    let mut a = Mat::zeros(config.n, config.k);
    let scales: Vec<f64> = config.variances.iter().map(|v| v.sqrt()).collect();
    for i in 0..config.n {
        for (c, scale) in scales.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            a.set(i, c, z * scale);
        }
    }

    // Bernoulli draws, row-major. Probabilities are recomputed per row; only
    // the block-loaded leading columns need the dot product.
    let mut ds = BinaryDataset::empty(config.n, config.d, config.clone());
    let mut pi_store = if retain_pi {
        Some(Vec::with_capacity(config.n * config.d))
    } else {
        None
    };
    let mut prow = vec![0.0; config.d];
    for i in 0..config.n {
        for (j, slot) in prow.iter_mut().enumerate() {
            let mut xi = 0.0;
            for c in 0..config.k {
                xi += a.get(i, c) * b.get(j, c);
            }
            *slot = sigmoid(xi);
        }
        for (j, &p) in prow.iter().enumerate() {
            let u: f64 = rng.random();
            if u < p {
                ds.set(i, j);
            }
        }
        if let Some(store) = pi_store.as_mut() {
            store.extend_from_slice(&prow);
        }
    }
    ds.pi = pi_store;
    Ok(ds)
}
