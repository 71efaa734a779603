//! Latent block model bookkeeping: partitions, mixture weights, the cached
//! per-cell block log-densities and the complete-data log-likelihood.
//!
//! Labels are zero-based throughout the library.

use crate::error::{Error, Result};

/// Floor applied to mixture weights before taking logarithms.
pub const WEIGHT_FLOOR: f64 = 1e-10;

/// Row and column labels with their mixture weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CoPartition {
    pub z: Vec<usize>,
    pub w: Vec<usize>,
    pub pi: Vec<f64>,
    pub rho: Vec<f64>,
}

impl CoPartition {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn l(&self) -> usize {
        self.rho.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, weights) in [("pi", &self.pi), ("rho", &self.rho)] {
            if weights.iter().any(|&p| !(p > 0.0)) {
                return Err(Error::Numeric(format!("{name} has a nonpositive weight")));
            }
            let s: f64 = weights.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Numeric(format!("{name} sums to {s}")));
            }
        }
        if self.z.iter().any(|&k| k >= self.k()) || self.w.iter().any(|&l| l >= self.l()) {
            return Err(Error::Shape("label out of range".into()));
        }
        Ok(())
    }
}

/// Weights proportional to label counts, floored at [`WEIGHT_FLOOR`] and
/// renormalized.
pub fn proportions(labels: &[usize], n_clusters: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_clusters];
    for &c in labels {
        counts[c] += 1.0;
    }
    let total = labels.len() as f64;
    let floored: Vec<f64> = counts
        .iter()
        .map(|c| (c / total).max(WEIGHT_FLOOR))
        .collect();
    let s: f64 = floored.iter().sum();
    floored.into_iter().map(|p| p / s).collect()
}

/// Table of `log p(x_ij; theta_kl)` for every cell and block.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalCache {
    n: usize,
    d: usize,
    k: usize,
    l: usize,
    data: Vec<f64>,
}

impl MarginalCache {
    pub fn new(n: usize, d: usize, k: usize, l: usize) -> Self {
        MarginalCache {
            n,
            d,
            k,
            l,
            data: vec![0.0; n * d * k * l],
        }
    }

    /// Builds a cache from values laid out as `[i][j][k][l]`.
    pub fn from_vec(n: usize, d: usize, k: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d * k * l {
            return Err(Error::Shape(format!(
                "cache data has {} entries, expected {}",
                data.len(),
                n * d * k * l
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cache contains non-finite entries".into()));
        }
        Ok(MarginalCache { n, d, k, l, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.d, self.k, self.l)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.d + j) * self.k + k) * self.l + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.idx(i, j, k, l)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let idx = self.idx(i, j, k, l);
        self.data[idx] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn check(&self, z: Option<&[usize]>, w: Option<&[usize]>, k: usize, l: usize) -> Result<()> {
        if let Some(z) = z {
            if z.len() != self.n || z.iter().any(|&c| c >= self.k) {
                return Err(Error::Shape("row labels do not match the cache".into()));
            }
        }
        if let Some(w) = w {
            if w.len() != self.d || w.iter().any(|&c| c >= self.l) {
                return Err(Error::Shape("column labels do not match the cache".into()));
            }
        }
        if k != self.k || l != self.l {
            return Err(Error::Shape(format!(
                "weights imply {k}x{l} blocks, cache has {}x{}",
                self.k, self.l
            )));
        }
        Ok(())
    }
}

/// Complete-data log-likelihood of a co-partition under cached block densities.
pub fn complete_loglik(cache: &MarginalCache, part: &CoPartition) -> Result<f64> {
    cache.check(Some(&part.z), Some(&part.w), part.k(), part.l())?;
    let row_terms: f64 = part.z.iter().map(|&k| part.pi[k].max(WEIGHT_FLOOR).ln()).sum();
    let col_terms: f64 = part.w.iter().map(|&l| part.rho[l].max(WEIGHT_FLOOR).ln()).sum();
    let mut cell_terms = 0.0;
    for (i, &k) in part.z.iter().enumerate() {
        for (j, &l) in part.w.iter().enumerate() {
            cell_terms += cache.get(i, j, k, l);
        }
    }
    Ok(row_terms + col_terms + cell_terms)
}

/// Normalizes log-weights in place into probabilities.
pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in logits.iter_mut() {
        *v /= s;
    }
}

/// Conditional row-label probabilities (n x K) given column labels.
pub fn row_conditionals(cache: &MarginalCache, w: &[usize], pi: &[f64]) -> Result<Vec<Vec<f64>>> {
    cache.check(None, Some(w), pi.len(), cache.l)?;
    Ok((0..cache.n).map(|i| row_probs(cache, i, w, pi)).collect())
}

pub(crate) fn row_probs(cache: &MarginalCache, i: usize, w: &[usize], pi: &[f64]) -> Vec<f64> {
    let mut logits: Vec<f64> = pi.iter().map(|p| p.max(WEIGHT_FLOOR).ln()).collect();
    for (j, &l) in w.iter().enumerate() {
        for (k, lg) in logits.iter_mut().enumerate() {
            *lg += cache.get(i, j, k, l);
        }
    }
    softmax_in_place(&mut logits);
    logits
}

/// Conditional column-label probabilities (d x L) given row labels.
pub fn col_conditionals(cache: &MarginalCache, z: &[usize], rho: &[f64]) -> Result<Vec<Vec<f64>>> {
    cache.check(Some(z), None, cache.k, rho.len())?;
    Ok((0..cache.d).map(|j| col_probs(cache, j, z, rho)).collect())
}

pub(crate) fn col_probs(cache: &MarginalCache, j: usize, z: &[usize], rho: &[f64]) -> Vec<f64> {
    let mut logits: Vec<f64> = rho.iter().map(|p| p.max(WEIGHT_FLOOR).ln()).collect();
    for (i, &k) in z.iter().enumerate() {
        for (l, lg) in logits.iter_mut().enumerate() {
            *lg += cache.get(i, j, k, l);
        }
    }
    softmax_in_place(&mut logits);
    logits
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_sums_cells() {
        let cache = MarginalCache::from_vec(2, 3, 1, 1, vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();
        let part = CoPartition {
            z: vec![0, 0],
            w: vec![0, 0, 0],
            pi: vec![1.0],
            rho: vec![1.0],
        };
        assert!((complete_loglik(&cache, &part).unwrap() + 21.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cache_returns_weights() {
        let cache = MarginalCache::from_vec(3, 2, 3, 2, vec![-7.5; 36]).unwrap();
        let pi = [0.2, 0.5, 0.3];
        let rows = row_conditionals(&cache, &[0, 1], &pi).unwrap();
        for r in rows {
            for (a, b) in r.iter().zip(pi) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let rho = [0.9, 0.1];
        let cols = col_conditionals(&cache, &[0, 2, 1], &rho).unwrap();
        for c in cols {
            assert!((c[0] - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn saturation() {
        let mut cache = MarginalCache::new(1, 1, 2, 1);
        cache.set(0, 0, 1, 0, 1000.0);
        let r = row_conditionals(&cache, &[0], &[0.5, 0.5]).unwrap();
        assert!((r[0][1] - 1.0).abs() < 1e-10);
        assert!(r[0].iter().all(|p| p.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let cache = MarginalCache::new(2, 2, 2, 2);
        let part = CoPartition {
            z: vec![0, 0, 1],
            w: vec![0, 1],
            pi: vec![0.5, 0.5],
            rho: vec![0.5, 0.5],
        };
        assert!(matches!(complete_loglik(&cache, &part), Err(Error::Shape(_))));
        assert!(MarginalCache::from_vec(1, 1, 1, 1, vec![]).is_err());
    }

    #[test]
    fn proportions_floor_and_count() {
        let p = proportions(&[0; 10], 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[1] > 0.0 && p[1] < 1e-9);
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        assert_eq!(proportions(&labels, 4), vec![0.25; 4]);
    }
}
