//! Lloyd's k-means with k-means++ seeding, used to initialize partitions
//! and as the double k-means baseline.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::CurveGrid;

const MAX_ITER: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters the points into `k` groups; no group is left empty.
pub fn kmeans<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let dim = points[0].len();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
        for (p, d) in points.iter().zip(nearest.iter_mut()) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_ITER {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        fill_empty(points, &mut labels, &centers, k);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    Ok(labels)
}

/// Moves the point farthest from its center into each empty cluster.
fn fill_empty(points: &[Vec<f64>], labels: &mut [usize], centers: &[Vec<f64>], k: usize) {
    loop {
        let used: BTreeSet<usize> = labels.iter().copied().collect();
        let Some(empty) = (0..k).find(|c| !used.contains(c)) else {
            return;
        };
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&c| counts[c] += 1);
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centers[labels[a]]).total_cmp(&sq_dist(&points[b], &centers[labels[b]]))
            })
            .expect("k <= n guarantees a donor cluster");
        labels[far] = empty;
    }
}

fn global_times(grid: &CurveGrid) -> Vec<f64> {
    let mut t: Vec<f64> = grid.cells.iter().flat_map(|c| c.times.iter().copied()).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn value_at(grid: &CurveGrid, i: usize, j: usize, t: f64) -> Option<f64> {
    let c = grid.cell(i, j);
    c.times
        .iter()
        .position(|&s| s == t)
        .and_then(|p| c.values[p])
}

/// Per-row feature vectors: curves concatenated across columns on the
/// global time grid, missing entries imputed by the row's mean.
pub fn row_features(grid: &CurveGrid) -> Vec<Vec<f64>> {
    let times = global_times(grid);
    (0..grid.n())
        .map(|i| {
            let raw: Vec<Option<f64>> = (0..grid.d())
                .flat_map(|j| times.iter().map(move |&t| (j, t)))
                .map(|(j, t)| value_at(grid, i, j, t))
                .collect();
            impute(raw)
        })
        .collect()
}

/// Per-column feature vectors, imputed by the column's mean.
pub fn col_features(grid: &CurveGrid) -> Vec<Vec<f64>> {
    let times = global_times(grid);
    (0..grid.d())
        .map(|j| {
            let raw: Vec<Option<f64>> = (0..grid.n())
                .flat_map(|i| times.iter().map(move |&t| (i, t)))
                .map(|(i, t)| value_at(grid, i, j, t))
                .collect();
            impute(raw)
        })
        .collect()
}

fn impute(raw: Vec<Option<f64>>) -> Vec<f64> {
    let obs: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = if obs.is_empty() {
        0.0
    } else {
        obs.iter().sum::<f64>() / obs.len() as f64
    };
    raw.into_iter().map(|v| v.unwrap_or(mean)).collect()
}

/// Independent k-means on rows and on columns.
pub fn double_kmeans<R: Rng + ?Sized>(
    grid: &CurveGrid,
    k: usize,
    l: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let z = kmeans(&row_features(grid), k, rng)?;
    let w = kmeans(&col_features(grid), l, rng)?;
    Ok((z, w))
}
