//! Stationary bootstrap over the time axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pinn::spline::quantile_sorted;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapPlan {
    pub replicates: usize,
    /// Expected block length.
    pub mean_block: f64,
    pub seed: u64,
}

impl BootstrapPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || !(self.mean_block >= 1.0) {
            return Err(Error::InvalidConfig(format!("invalid bootstrap plan {self:?}")));
        }
        Ok(())
    }
}

/// `(start, length)` blocks covering `t_len` steps; the last block may
/// extend past what is used. Lengths are geometric on `{1, 2, ...}` with
/// mean `mean_block`.
pub fn stationary_blocks(t_len: usize, mean_block: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let geo = Geometric::new(1.0 / mean_block).expect("mean block length >= 1");
    let mut blocks = Vec::new();
    let mut filled = 0;
    while filled < t_len {
        let start = rng.gen_range(0..t_len);
        let len = geo.sample(rng) as usize + 1;
        blocks.push((start, len));
        filled += len;
    }
    blocks
}

/// One resampled sequence of 0-based time indices of length `t_len`;
/// blocks running past the end wrap to the start.
pub fn resample_times(t_len: usize, mean_block: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(t_len);
    for (start, len) in stationary_blocks(t_len, mean_block, rng) {
        for j in 0..len {
            if out.len() == t_len {
                break;
            }
            out.push((start + j) % t_len);
        }
    }
    out
}

/// Replicate index sequences for `plan`.
pub fn stationary_bootstrap(t_len: usize, plan: &BootstrapPlan) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    if t_len == 0 {
        return Err(Error::invalid("bootstrap needs at least one time step"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    Ok((0..plan.replicates).map(|_| resample_times(t_len, plan.mean_block, &mut rng)).collect())
}

/// Pointwise quantiles across replicates: one row per level in `probs`.
pub fn envelope(samples: &[Vec<f64>], probs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = samples.first() else {
        return Err(Error::invalid("envelope needs at least one replicate"));
    };
    let k = first.len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(Error::Shape("replicates differ in length".into()));
    }
    let mut out = vec![vec![0.0; k]; probs.len()];
    let mut col = vec![0.0; samples.len()];
    for j in 0..k {
        for (c, s) in col.iter_mut().zip(samples) {
            *c = s[j];
        }
        col.sort_by(f64::total_cmp);
        for (row, &p) in out.iter_mut().zip(probs) {
            row[j] = quantile_sorted(&col, p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_and_range() {
        let plan = BootstrapPlan { replicates: 200, mean_block: 4.0, seed: 1 };
        for t in [1, 2, 7, 100] {
            for r in stationary_bootstrap(t, &plan).unwrap() {
                assert_eq!(r.len(), t);
                assert!(r.iter().all(|&i| i < t));
            }
        }
    }

    #[test]
    fn unit_mean_gives_single_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = stationary_blocks(50, 1.0, &mut rng);
        assert_eq!(b.len(), 50);
        assert!(b.iter().all(|&(_, l)| l == 1));
    }

    #[test]
    fn mean_block_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0usize;
        let mut count = 0usize;
        for _ in 0..10_000 {
            for (_, l) in stationary_blocks(60, 6.0, &mut rng) {
                total += l;
                count += 1;
            }
        }
        let mean = total as f64 / count as f64;
        assert!((mean - 6.0).abs() < 0.3, "{mean}");
    }

    #[test]
    fn wrapping_continues_from_the_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blocks = stationary_blocks(10, 8.0, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = resample_times(10, 8.0, &mut rng);
        let (s, l) = blocks[0];
        for j in 0..l.min(10) {
            assert_eq!(r[j], (s + j) % 10);
        }
    }

    #[test]
    fn marginal_frequencies_are_uniform() {
        let plan = BootstrapPlan { replicates: 5000, mean_block: 5.0, seed: 9 };
        let mut counts = [0usize; 20];
        for r in stationary_bootstrap(20, &plan).unwrap() {
            for i in r {
                counts[i] += 1;
            }
        }
        let expected = 5000.0;
        for c in counts {
            assert!((c as f64 - expected).abs() < 0.06 * expected, "{counts:?}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let plan = BootstrapPlan { replicates: 3, mean_block: 3.0, seed: 5 };
        assert_eq!(stationary_bootstrap(30, &plan).unwrap(), stationary_bootstrap(30, &plan).unwrap());
        let other = BootstrapPlan { seed: 6, ..plan };
        assert_ne!(stationary_bootstrap(30, &plan).unwrap(), stationary_bootstrap(30, &other).unwrap());
    }

    #[test]
    fn envelope_quantiles() {
        let s: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 10.0 - i as f64]).collect();
        let e = envelope(&s, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(e, vec![vec![0.0, 6.0], vec![2.0, 8.0], vec![4.0, 10.0]]);
    }
}
