//! Lloyd's k-means with seeded farthest-point initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KMeansError {
    #[error("k = {k} but only {points} points")]
    TooFewPoints { k: usize, points: usize },
    #[error("only {distinct} distinct points for k = {k}")]
    TooFewDistinct { k: usize, distinct: usize },
    #[error("empty clusters persisted after {0} re-seeds")]
    EmptyCluster(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub max_reseeds: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 6,
            seed: 0,
            max_iter: 300,
            max_reseeds: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub inertia: f64,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared
/// distance.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// First centroid drawn uniformly from a seeded RNG; each further centroid is
/// the point farthest from those already chosen.
pub fn farthest_point_seeds(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, KMeansError> {
    if points.len() < k || k == 0 {
        return Err(KMeansError::TooFewPoints {
            k,
            points: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut chosen = vec![first];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..points.len() {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        if min_d[best] == 0.0 {
            return Err(KMeansError::TooFewDistinct {
                k,
                distinct: chosen.len(),
            });
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, &points[best]));
        }
    }
    Ok(chosen)
}

pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansFit, KMeansError> {
    let seeds = farthest_point_seeds(points, cfg.k, cfg.seed)?;
    let dim = points[0].len();
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut reseeds = 0;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            dists[i] = d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }

        let empty: Vec<usize> = (0..cfg.k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            reseeds += empty.len();
            if reseeds > cfg.max_reseeds {
                return Err(KMeansError::EmptyCluster(cfg.max_reseeds));
            }
            // Move each empty centroid onto the worst-fit point, then
            // reassign on the next pass.
            let mut taken = Vec::new();
            for &c in &empty {
                let mut worst: Option<usize> = None;
                for i in 0..points.len() {
                    if taken.contains(&i) {
                        continue;
                    }
                    if worst.is_none_or(|w| dists[i] > dists[w]) {
                        worst = Some(i);
                    }
                }
                let w = worst.expect("k <= number of points");
                taken.push(w);
                centroids[c] = points[w].clone();
                dists[w] = 0.0;
            }
            assignments.fill(usize::MAX);
            continue;
        }

        for c in 0..cfg.k {
            let n = counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s / n).collect();
        }
        if !changed {
            break;
        }
    }

    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum();
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
        inertia,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<Vec<f64>> {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for i in 0..10 {
                let o = i as f64 * 0.1;
                pts.push(vec![cx + o, cy - o]);
            }
        }
        pts
    }

    #[test]
    fn separates_blobs() {
        let pts = blobs();
        let fit = kmeans(&pts, &KMeansConfig { k: 3, ..Default::default() }).unwrap();
        for block in fit.assignments.chunks(10) {
            assert!(block.iter().all(|&a| a == block[0]));
        }
        let mut firsts: Vec<_> = fit.assignments.chunks(10).map(|b| b[0]).collect();
        firsts.sort();
        firsts.dedup();
        assert_eq!(firsts.len(), 3);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let pts = blobs();
        let cfg = KMeansConfig { k: 4, seed: 11, ..Default::default() };
        assert_eq!(kmeans(&pts, &cfg).unwrap(), kmeans(&pts, &cfg).unwrap());
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![vec![1.0, 1.0]; 5];
        assert!(matches!(
            kmeans(&pts, &KMeansConfig { k: 2, ..Default::default() }),
            Err(KMeansError::TooFewDistinct { .. })
        ));
        assert!(matches!(
            kmeans(&pts[..1], &KMeansConfig { k: 2, ..Default::default() }),
            Err(KMeansError::TooFewPoints { .. })
        ));
    }
}
