//! Partition agreement: the adjusted Rand index and its co-clustering
//! extension, computed on the cell partition induced by a pair of row and
//! column partitions.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

fn choose2(n: u128) -> u128 {
    n * n.saturating_sub(1) / 2
}

fn dense_ids<T: Eq + Hash + Copy>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn ari_generic<T: Eq + Hash + Copy, U: Eq + Hash + Copy>(a: &[T], b: &[U]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "label vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("label vectors are empty".into()));
    }
    let (ia, na) = dense_ids(a);
    let (ib, nb) = dense_ids(b);
    let mut table: HashMap<(usize, usize), u128> = HashMap::new();
    let mut rows = vec![0u128; na];
    let mut cols = vec![0u128; nb];
    for (&x, &y) in ia.iter().zip(&ib) {
        *table.entry((x, y)).or_insert(0) += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let index: u128 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: u128 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: u128 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u128);
    if total == 0 {
        return Ok(1.0);
    }
    let expected = (sum_a as f64) * (sum_b as f64) / total as f64;
    let max_index = 0.5 * (sum_a as f64 + sum_b as f64);
    if max_index == expected {
        // both partitions trivial (all singletons or a single cluster)
        return Ok(if sum_a == sum_b { 1.0 } else { 0.0 });
    }
    Ok((index as f64 - expected) / (max_index - expected))
}

/// Adjusted Rand index between two labelings of the same items.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    ari_generic(a, b)
}

/// Co-clustering adjusted Rand index: the ARI between the cell partitions
/// where cell `(i, j)` is labeled `(z[i], w[j])`.
pub fn cari(z1: &[usize], w1: &[usize], z2: &[usize], w2: &[usize]) -> Result<f64> {
    if z1.len() != z2.len() || w1.len() != w2.len() {
        return Err(Error::Shape(format!(
            "co-partitions have shapes {}x{} and {}x{}",
            z1.len(),
            w1.len(),
            z2.len(),
            w2.len()
        )));
    }
    let cells = |z: &[usize], w: &[usize]| -> Vec<(usize, usize)> {
        z.iter()
            .flat_map(|&zi| w.iter().map(move |&wj| (zi, wj)))
            .collect()
    };
    ari_generic(&cells(z1, w1), &cells(z2, w2))
}
