//! One-dimensional k-means used to pick the top-ranking proposals of a class.

use std::cmp::Ordering;

const MAX_ITERATIONS: usize = 100;

/// Lloyd's algorithm on scalars.
///
/// Centers start at the `(2i + 1) / (2n)` quantiles of the data (linear
/// interpolation between order statistics) and stay sorted ascending, which
/// 1-D Lloyd iterations preserve. A point equidistant from two centers goes
/// to the lower one. An emptied cluster keeps its previous center.
///
/// Returns `(centers, assignment)`.
pub fn kmeans_1d(values: &[f64], n_clusters: usize) -> (Vec<f64>, Vec<usize>) {
    assert!(n_clusters >= 1 && !values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));

    let mut centers: Vec<f64> = (0..n_clusters)
        .map(|i| quantile(&sorted, (2 * i + 1) as f64 / (2 * n_clusters) as f64))
        .collect();
    let mut assignment = assign(values, &centers);

    for _ in 0..MAX_ITERATIONS {
        let mut sums = vec![0.0; n_clusters];
        let mut counts = vec![0usize; n_clusters];
        for (&v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for ((c, s), n) in centers.iter_mut().zip(&sums).zip(&counts) {
            if *n > 0 {
                *c = s / *n as f64;
            }
        }
        let next = assign(values, &centers);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    (centers, assignment)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn assign(values: &[f64], centers: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|&v| {
            let mut best = 0;
            let mut best_dist = (v - centers[0]).abs();
            for (j, &c) in centers.iter().enumerate().skip(1) {
                let d = (v - c).abs();
                // strict: ties stay with the lower center
                if d < best_dist {
                    best = j;
                    best_dist = d;
                }
            }
            best
        })
        .collect()
}

/// Indices (ascending) of the proposals in the score cluster with the highest
/// center. With fewer scores than clusters only the argmax is returned.
pub fn select_top_ranking(scores: &[f64], n_clusters: usize) -> Vec<usize> {
    assert!(n_clusters >= 1, "need at least one score cluster");
    if scores.is_empty() {
        return Vec::new();
    }
    if scores.len() < n_clusters {
        return vec![argmax(scores)];
    }
    let (centers, assignment) = kmeans_1d(scores, n_clusters);
    let mut counts = vec![0usize; n_clusters];
    for &a in &assignment {
        counts[a] += 1;
    }
    let top = (0..n_clusters)
        .filter(|&j| counts[j] > 0)
        .max_by(|&a, &b| centers[a].partial_cmp(&centers[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)))
        .expect("some cluster is non-empty");
    assignment
        .iter()
        .enumerate()
        .filter(|(_, &a)| a == top)
        .map(|(i, _)| i)
        .collect()
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
