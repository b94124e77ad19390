//! Brute-force oracles shared by the integration tests. None of these call
//! into the library code they check.

#![allow(dead_code)]

use rand::Rng;
use std::collections::BTreeSet;

/// Recursive balanced split with a full sort per cell: widest axis (lowest
/// index on ties), order by (coordinate, index), lower half gets ⌈n/2⌉,
/// clusters numbered depth-first lower side first.
pub fn oracle_clusters(coords: &[f64], dim: usize, c: usize) -> Vec<usize> {
    fn rec(idx: Vec<usize>, coords: &[f64], dim: usize, c: usize, next: &mut usize, out: &mut [usize]) {
        if idx.len() <= c {
            for &i in &idx {
                out[i] = *next;
            }
            *next += 1;
            return;
        }
        let mut axis = 0;
        let mut best = f64::NEG_INFINITY;
        for a in 0..dim {
            let lo = idx.iter().map(|&i| coords[i * dim + a]).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| coords[i * dim + a]).fold(f64::NEG_INFINITY, f64::max);
            if hi - lo > best {
                best = hi - lo;
                axis = a;
            }
        }
        let mut sorted = idx;
        sorted.sort_by(|&a, &b| {
            coords[a * dim + axis]
                .partial_cmp(&coords[b * dim + axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let upper = sorted.split_off(sorted.len().div_ceil(2));
        rec(sorted, coords, dim, c, next, out);
        rec(upper, coords, dim, c, next, out);
    }
    let n = coords.len() / dim;
    let mut out = vec![usize::MAX; n];
    let mut next = 0;
    rec((0..n).collect(), coords, dim, c, &mut next, &mut out);
    out
}

pub fn brute_centroids(coords: &[f64], dim: usize, cluster_of: &[usize], m: usize) -> Vec<f64> {
    let mut sum = vec![0.0; m * dim];
    let mut count = vec![0usize; m];
    for (i, &k) in cluster_of.iter().enumerate() {
        count[k] += 1;
        for a in 0..dim {
            sum[k * dim + a] += coords[i * dim + a];
        }
    }
    for k in 0..m {
        for a in 0..dim {
            sum[k * dim + a] /= count[k] as f64;
        }
    }
    sum
}

/// k nearest by (squared distance, index), then symmetrized and sorted.
pub fn brute_knn(coords: &[f64], dim: usize, k: usize) -> Vec<(usize, usize)> {
    let n = coords.len() / dim;
    let mut set = BTreeSet::new();
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = (0..dim)
                    .map(|a| (coords[i * dim + a] - coords[j * dim + a]).powi(2))
                    .sum();
                (d, j)
            })
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            set.insert((i, j));
            set.insert((j, i));
        }
    }
    set.into_iter().collect()
}

pub fn median_oracle(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn r2_oracle(y: &[f64], f: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for i in 0..y.len() {
        ss_res += (y[i] - f[i]).powi(2);
        ss_tot += (y[i] - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}

pub fn random_coords(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n * dim).map(|_| rng.gen::<f64>()).collect()
}

/// Longest non-decreasing subsequence length.
pub fn longest_non_decreasing(values: &[f64]) -> usize {
    let mut best = vec![1usize; values.len()];
    for i in 0..values.len() {
        for j in 0..i {
            if values[j] <= values[i] {
                best[i] = best[i].max(best[j] + 1);
            }
        }
    }
    best.into_iter().max().unwrap_or(0)
}

/// Exact `q`-quantile by the nearest-rank rule.
pub fn nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
