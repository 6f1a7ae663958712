//! Column standardization with statistics frozen from training rows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-column mean and sample standard deviation (n − 1 denominator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ColumnStats {
    /// Identity statistics (mean 0, sd 1).
    pub fn identity(cols: usize) -> Self {
        ColumnStats {
            mean: vec![0.0; cols],
            sd: vec![1.0; cols],
        }
    }

    /// Fits statistics on the rows of `x`; `names` label errors.
    pub fn fit(x: &Tensor, names: &[String]) -> Result<Self> {
        let n = x.rows;
        if n < 2 {
            return Err(Error::invalid("standardization needs at least two rows"));
        }
        let mut mean = vec![0.0; x.cols];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut ss = vec![0.0; x.cols];
        for r in 0..n {
            for ((s, v), m) in ss.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd: Vec<f64> = ss.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
        for (j, s) in sd.iter().enumerate() {
            if !(*s > 1e-12 * (1.0 + mean[j].abs())) {
                let name = names.get(j).cloned().unwrap_or_else(|| format!("column {j}"));
                return Err(Error::ConstantFeature(name));
            }
        }
        Ok(ColumnStats { mean, sd })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.cols, self.mean.len(), "column count differs from fitted statistics");
        let mut out = x.clone();
        for r in 0..out.rows {
            for (j, v) in out.data[r * x.cols..(r + 1) * x.cols].iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.sd[j];
            }
        }
        out
    }

    /// Content hash, used to assert that statistics stay frozen.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.sd) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Standardizes `x` column-wise and returns the statistics used.
pub fn standardize(x: &Tensor, names: &[String]) -> Result<(Tensor, ColumnStats)> {
    let st = ColumnStats::fit(x, names)?;
    Ok((st.apply(x), st))
}
