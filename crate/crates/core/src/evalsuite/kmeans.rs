use rayon::prelude::*;

use crate::error::{bail, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the inertia improves by less than this (relative).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.below(points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, rng: &mut RngStream) -> KMeansFit {
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = vec![0; points.len()];
    let mut prev = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            assignment[i] = j;
            inertia += d;
        }
        if prev.is_finite() && prev - inertia <= cfg.tol * prev {
            break;
        }
        prev = inertia;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], &centroids[assignment[a]]);
                        let db = sq_dist(&points[b], &centroids[assignment[b]]);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[j] = points[far].clone();
            }
        }
    }
    KMeansFit {
        assignment,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// inertia wins (lowest restart index on ties). Restarts run in parallel on
/// independent streams, so the result depends only on `seed`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if k == 0 || k > points.len() {
        bail!(Input, "k = {k} for {} points", points.len());
    }
    if points.iter().any(|p| p.len() != points[0].len() || p.iter().any(|x| !x.is_finite())) {
        bail!(Input, "points must be finite with a common dimension");
    }
    let root = RngStream::new(seed);
    let fits: Vec<KMeansFit> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(points, k, cfg, &mut root.split_index("kmeans-restart", r as u64)))
        .collect();
    let mut best = 0;
    for (i, f) in fits.iter().enumerate() {
        if f.inertia < fits[best].inertia {
            best = i;
        }
    }
    Ok(fits.into_iter().nth(best).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_blobs() {
        let mut r = RngStream::new(1);
        let pts: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let c = if i < 20 { -5.0 } else { 5.0 };
                vec![c + 0.1 * r.normal(), 0.1 * r.normal()]
            })
            .collect();
        let f = kmeans(&pts, 2, 7, &KMeansConfig::default()).unwrap();
        assert!(f.assignment[..20].iter().all(|&a| a == f.assignment[0]));
        assert!(f.assignment[20..].iter().all(|&a| a == f.assignment[20]));
        assert_ne!(f.assignment[0], f.assignment[20]);
    }

    #[test]
    fn converged_centroids_are_cluster_means() {
        let mut r = RngStream::new(9);
        let pts: Vec<Vec<f64>> = (0..90).map(|i| vec![(i % 3) as f64 + 0.3 * r.normal(), 0.3 * r.normal()]).collect();
        let f = kmeans(&pts, 3, 1, &KMeansConfig { tol: 0.0, ..Default::default() }).unwrap();
        for (j, c) in f.centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&f.assignment).filter(|(_, &a)| a == j).map(|(p, _)| p).collect();
            for d in 0..2 {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                assert!((c[d] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k_larger_than_m_rejected() {
        assert!(kmeans(&[vec![0.0]], 2, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn seeded_result_is_repeatable() {
        let mut r = RngStream::new(2);
        let pts: Vec<Vec<f64>> = (0..60).map(|_| vec![r.normal(), r.normal()]).collect();
        let a = kmeans(&pts, 4, 3, &KMeansConfig::default()).unwrap();
        let b = kmeans(&pts, 4, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
