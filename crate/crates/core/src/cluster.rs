//! Lloyd k-means over flat `[n×dim]` point buffers.

/// Result of [`lloyd`]: `k×dim` centroids and one cluster id per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
}

/// Runs at most `max_iter` Lloyd iterations seeded with the first `k`
/// points. An emptied cluster keeps its previous centroid. Requires
/// `1 <= k <= n`.
pub fn lloyd(points: &[f64], dim: usize, k: usize, max_iter: usize) -> Clustering {
    let n = points.len() / dim;
    assert!(k >= 1 && k <= n, "k = {k} with {n} points");
    let mut centroids = points[..k * dim].to_vec();
    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let best = nearest(&centroids, dim, p);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.chunks_exact(dim).zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, (sum, &count)) in centroids
            .chunks_exact_mut(dim)
            .zip(sums.chunks_exact(dim).zip(&counts))
        {
            if count > 0 {
                for (cv, sv) in c.iter_mut().zip(sum) {
                    *cv = sv / count as f64;
                }
            }
        }
    }
    Clustering {
        centroids,
        assignment,
        iterations,
    }
}

fn nearest(centroids: &[f64], dim: usize, p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}
