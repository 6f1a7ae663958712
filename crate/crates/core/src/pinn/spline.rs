//! Thin-plate radial basis `ψ(r) = r² log r`, knot placement and the
//! smoothing penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `r² log |r|` with the continuous extension `ψ(0) = 0`.
pub fn psi(r: f64) -> f64 {
    if r == 0.0 {
        0.0
    } else {
        r * r * r.abs().ln()
    }
}

/// Type-7 empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `k` knots at equally spaced marginal quantiles `j/(k−1)`; ties are pushed
/// apart by `1e−9·range` so the knots are strictly increasing.
pub fn place_knots(values: &[f64], k: usize, name: &str) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::invalid("need at least two knots"));
    }
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Err(Error::ConstantFeature(name.to_string()));
    }
    v.sort_by(f64::total_cmp);
    let range = v[v.len() - 1] - v[0];
    if !(range > 0.0) {
        return Err(Error::ConstantFeature(name.to_string()));
    }
    let mut knots: Vec<f64> = (0..k).map(|j| quantile_sorted(&v, j as f64 / (k - 1) as f64)).collect();
    for j in 1..k {
        if knots[j] <= knots[j - 1] {
            knots[j] = knots[j - 1] + 1e-9 * range;
        }
    }
    Ok(knots)
}

/// Knots and smoothing weight of one additive predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineTerm {
    pub predictor: usize,
    pub knots: Vec<f64>,
    pub lambda: f64,
}

impl SplineTerm {
    /// Raw basis `ψ(x − x*_j)` for each value, one column per knot.
    pub fn basis(&self, x: &[f64]) -> Tensor {
        let k = self.knots.len();
        let mut out = Tensor::zeros(x.len(), k);
        for (r, &xv) in x.iter().enumerate() {
            for (j, &kn) in self.knots.iter().enumerate() {
                out.data[r * k + j] = psi(xv - kn);
            }
        }
        out
    }

    /// `S*[j, l] = ψ(x*_j − x*_l)`.
    pub fn penalty_block(&self) -> Tensor {
        let k = self.knots.len();
        let mut s = Tensor::zeros(k, k);
        for j in 0..k {
            for l in 0..k {
                s.data[j * k + l] = psi(self.knots[j] - self.knots[l]);
            }
        }
        s
    }
}

/// Block-diagonal `S_λ = Σ λ_i S_i` over the terms.
pub fn penalty_matrix(terms: &[SplineTerm]) -> Tensor {
    let total: usize = terms.iter().map(|t| t.knots.len()).sum();
    let mut s = Tensor::zeros(total, total);
    let mut off = 0;
    for t in terms {
        let k = t.knots.len();
        let b = t.penalty_block();
        for j in 0..k {
            for l in 0..k {
                s.data[(off + j) * total + off + l] = t.lambda * b.data[j * k + l];
            }
        }
        off += k;
    }
    s
}

/// `ωᵀ S_λ ω / 2`.
pub fn penalty_value(omega: &[f64], terms: &[SplineTerm]) -> f64 {
    let s = penalty_matrix(terms);
    assert_eq!(s.rows, omega.len(), "spline weight count");
    let mut acc = 0.0;
    for j in 0..s.rows {
        let row = s.row(j);
        let dot: f64 = row.iter().zip(omega).map(|(a, b)| a * b).sum();
        acc += omega[j] * dot;
    }
    0.5 * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_values() {
        assert_eq!(psi(0.0), 0.0);
        assert_eq!(psi(1.0), 0.0);
        assert_eq!(psi(-1.0), 0.0);
        assert!((psi(3.0 - 1.0) - 2.772_588_722_239_781).abs() < 1e-14);
    }

    #[test]
    fn penalty_examples() {
        let t = SplineTerm { predictor: 0, knots: vec![0.0, 2.0], lambda: 1.0 };
        assert!((penalty_value(&[1.0, 1.0], &[t.clone()]) - 2.772_588_722_239_781).abs() < 1e-14);
        assert_eq!(penalty_value(&[0.0, 0.0], &[t.clone()]), 0.0);
        let t0 = SplineTerm { lambda: 0.0, ..t };
        assert_eq!(penalty_value(&[1.0, 1.0], &[t0]), 0.0);
    }

    #[test]
    fn knots_are_quantiles_and_strict() {
        let v: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let k = place_knots(&v, 5, "x").unwrap();
        assert_eq!(k, vec![0.0, 25.0, 50.0, 75.0, 100.0]);
        let ties = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let k = place_knots(&ties, 4, "x").unwrap();
        assert!(k.windows(2).all(|w| w[1] > w[0]));
        assert!(place_knots(&[2.0; 5], 3, "x").is_err());
    }
}
