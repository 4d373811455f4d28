//! Lloyd's k-means with k-means++ seeding, used to train IVF coarse centroids.
//!
//! Assignment always uses squared L2, independent of the search metric.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::vectorstore::normalized;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub n_clusters: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Train on unit-normalized copies of the input.
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `n_clusters × dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (&x, &y)| {
        let d = x as f64 - y as f64;
        s + d * d
    })
}

/// k-means++ seeding. Returns the row indices chosen as initial centers.
///
/// When every remaining point coincides with a chosen center the
/// lowest-index unchosen row is taken, so the result is always `k` distinct rows.
pub fn kmeans_plus_plus<R: Rng>(data: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = Vec::with_capacity(k);
    if k == 0 || n == 0 {
        return chosen;
    }
    chosen.push(rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_l2(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        let c = row(next);
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_l2(&data[i * dim..(i + 1) * dim], c)));
    }
    chosen
}

/// Index of the nearest centroid, ties to the lower index.
fn nearest_centroid(v: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_l2(v, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn assign_all(data: &[f32], dim: usize, centroids: &[f32]) -> Vec<usize> {
    data.par_chunks_exact(dim)
        .map(|v| nearest_centroid(v, centroids, dim))
        .collect()
}

fn means(data: &[f32], dim: usize, k: usize, assignment: &[usize]) -> Vec<f32> {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (v, &a) in data.chunks_exact(dim).zip(assignment) {
        counts[a] += 1;
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    sums.chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| {
            s.iter()
                .map(move |&x| if c == 0 { 0.0 } else { (x / c as f64) as f32 })
        })
        .collect()
}

/// Fills every empty cluster with the point of the largest cluster that lies
/// farthest from that cluster's mean.
fn repair_empty(data: &[f32], dim: usize, k: usize, assignment: &mut [usize]) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        if counts[largest] < 2 {
            break;
        }
        let centroid = means(data, dim, k, assignment);
        let c = &centroid[largest * dim..(largest + 1) * dim];
        let mut far = None;
        let mut far_d = -1.0f64;
        for (i, v) in data.chunks_exact(dim).enumerate() {
            if assignment[i] == largest {
                let d = sq_l2(v, c);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        let far = far.unwrap();
        assignment[far] = empty;
        counts[largest] -= 1;
        counts[empty] += 1;
    }
}

/// Lloyd iterations from explicit initial centroids, stopping at an
/// assignment fixpoint or after `max_iters` updates. Final centroids are the
/// means of the final assignment.
pub fn lloyd(data: &[f32], dim: usize, init: Vec<f32>, max_iters: usize) -> KMeansResult {
    let k = init.len() / dim;
    let mut centroids = init;
    let mut assignment = assign_all(data, dim, &centroids);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        repair_empty(data, dim, k, &mut assignment);
        centroids = means(data, dim, k, &assignment);
        let next = assign_all(data, dim, &centroids);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    repair_empty(data, dim, k, &mut assignment);
    centroids = means(data, dim, k, &assignment);
    KMeansResult { centroids, assignment, iterations, converged }
}

pub fn kmeans(data: &[f32], dim: usize, params: &KMeansParams) -> Result<KMeansResult> {
    let n = data.len().checked_div(dim).unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("k-means needs at least one vector"));
    }
    if params.n_clusters == 0 || params.n_clusters > n {
        return Err(Error::invalid(format!(
            "n_clusters must be in 1..={n}, got {}",
            params.n_clusters
        )));
    }
    if params.max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }
    let train: Vec<f32>;
    let data = if params.normalize {
        train = data.chunks_exact(dim).flat_map(normalized).collect();
        &train[..]
    } else {
        data
    };
    let mut rng = rng_for(params.seed, "kmeans++");
    let init: Vec<f32> = kmeans_plus_plus(data, dim, params.n_clusters, &mut rng)
        .into_iter()
        .flat_map(|i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    Ok(lloyd(data, dim, init, params.max_iters))
}
