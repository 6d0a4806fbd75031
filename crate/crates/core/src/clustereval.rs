//! k-means and the clustering metrics ACC (best one-to-one matching), NMI and
//! ARI.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeng::Matrix;
use crate::error::{HerlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            restarts: 10,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seed(x: &Matrix, k: usize, rng: &mut Xoshiro256PlusPlus) -> Matrix {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut closest: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&closest) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (d, r) in closest.iter_mut().zip(x.rows()) {
            *d = d.min(sq_dist(r, x.row(pick)));
        }
    }
    centroids
}

/// Nearest centroid per point, ties to the lower index; returns the inertia.
fn assign(x: &Matrix, centroids: &Matrix, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (label, r) in labels.iter_mut().zip(x.rows()) {
        let mut best = (0, f64::INFINITY);
        for (c, cr) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(r, cr);
            if d < best.1 {
                best = (c, d);
            }
        }
        *label = best.0;
        inertia += best.1;
    }
    inertia
}

/// Centroid = mean of its points; an empty cluster keeps its previous centroid.
fn update(x: &Matrix, labels: &[usize], centroids: &mut Matrix) {
    let k = centroids.nrows();
    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = vec![0usize; k];
    for (&l, r) in labels.iter().zip(x.rows()) {
        sums.row_mut(l).scaled_add(1.0, &r);
        counts[l] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mean = sums.row(c).mapv(|v| v / count as f64);
            centroids.row_mut(c).assign(&mean);
        }
    }
}

fn lloyd(x: &Matrix, k: usize, max_iter: usize, seed: u64) -> ClusterResult {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(x, k, &mut rng);
    let mut labels = vec![usize::MAX; x.nrows()];
    let mut next = vec![0; x.nrows()];
    let mut history = Vec::new();
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter.max(1) {
        iterations += 1;
        inertia = assign(x, &centroids, &mut next);
        history.push(inertia);
        if next == labels {
            break;
        }
        labels.copy_from_slice(&next);
        if iterations < max_iter {
            update(x, &labels, &mut centroids);
        }
    }
    ClusterResult {
        assignments: next,
        centroids,
        inertia,
        history,
        iterations,
    }
}

/// Best of `cfg.restarts` k-means++ seeded Lloyd runs by inertia. Restarts run
/// in parallel; the result depends only on `seed`.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<ClusterResult> {
    let n = x.nrows();
    if n == 0 || x.ncols() == 0 {
        return Err(HerlError::EmptyInput("kmeans"));
    }
    if k == 0 || k > n {
        return Err(HerlError::config(format!("k must lie in [1, {n}], got {k}")));
    }
    if cfg.restarts == 0 {
        return Err(HerlError::config("kmeans needs at least one restart"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(HerlError::NonFinite("kmeans input".into()));
    }
    let x = x.as_standard_layout().into_owned();
    let mut master = Xoshiro256PlusPlus::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..cfg.restarts).map(|_| master.next_u64()).collect();
    let runs: Vec<ClusterResult> = seeds.par_iter().map(|&s| lloyd(&x, k, cfg.max_iter, s)).collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("at least one restart");
    Ok(best)
}

fn check_labels(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(HerlError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(HerlError::EmptyInput("label vectors"));
    }
    Ok(())
}

/// Dense relabelling to `0..k` in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Rows index `a`'s clusters, columns `b`'s.
fn contingency(a: &[usize], b: &[usize]) -> Array2<usize> {
    let (ca, ka) = compact(a);
    let (cb, kb) = compact(b);
    let mut table = Array2::zeros((ka, kb));
    for (&i, &j) in ca.iter().zip(&cb) {
        table[[i, j]] += 1;
    }
    table
}

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// paths with potentials). Returns the column assigned to each row.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Fraction of samples correctly labelled under the best one-to-one mapping
/// from predicted clusters to classes.
pub fn hungarian_acc(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_labels(y_true, y_pred)?;
    let table = contingency(y_pred, y_true);
    let size = table.nrows().max(table.ncols());
    let top = *table.iter().max().unwrap_or(&0) as f64;
    let mut cost = Array2::from_elem((size, size), top);
    for ((i, j), &c) in table.indexed_iter() {
        cost[[i, j]] = top - c as f64;
    }
    let matched: usize = hungarian(&cost)
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < table.nrows() && j < table.ncols())
        .map(|(i, &j)| table[[i, j]])
        .sum();
    Ok(matched as f64 / y_true.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the geometric mean of the entropies. When either
/// entropy is zero the score is 1 if both partitions are a single cluster and
/// 0 otherwise.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_labels(y_true, y_pred)?;
    let n = y_true.len() as f64;
    let table = contingency(y_true, y_pred);
    let rows: Vec<usize> = table.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<usize> = table.columns().into_iter().map(|c| c.sum()).collect();
    let (ha, hb) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(if rows.len() == 1 && cols.len() == 1 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for ((i, j), &c) in table.indexed_iter() {
        if c > 0 {
            let pij = c as f64 / n;
            mi += pij * (pij * n * n / (rows[i] as f64 * cols[j] as f64)).ln();
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn pairs(c: usize) -> f64 {
    let c = c as f64;
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table. A zero denominator (both
/// partitions trivial in the same way) scores 1.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_labels(y_true, y_pred)?;
    let table = contingency(y_true, y_pred);
    let index: f64 = table.iter().map(|&c| pairs(c)).sum();
    let a: f64 = table.rows().into_iter().map(|r| pairs(r.sum())).sum();
    let b: f64 = table.columns().into_iter().map(|c| pairs(c.sum())).sum();
    let expected = a * b / pairs(y_true.len());
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

pub fn score(y_true: &[usize], y_pred: &[usize]) -> Result<Scores> {
    Ok(Scores {
        acc: hungarian_acc(y_true, y_pred)?,
        nmi: nmi(y_true, y_pred)?,
        ari: ari(y_true, y_pred)?,
    })
}
