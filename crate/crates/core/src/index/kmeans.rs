use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nearest_centroid, CentroidIndex};
use crate::embedding::{l2_squared, VectorSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Stop once every centroid moves less than this fraction of the corpus
    /// bounding-box diagonal.
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iterations: 25,
            tolerance: 1e-4,
        }
    }
}

/// Lloyd's k-means with k-means++ seeding.
pub fn train_kmeans(corpus: &VectorSet, k: usize, seed: u64) -> Result<CentroidIndex> {
    train_kmeans_with(corpus, k, seed, KMeansConfig::default())
}

pub fn train_kmeans_with(
    corpus: &VectorSet,
    k: usize,
    seed: u64,
    config: KMeansConfig,
) -> Result<CentroidIndex> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if corpus.len() < k {
        return Err(Error::invalid(format!(
            "corpus of {} vectors is smaller than k = {k}",
            corpus.len()
        )));
    }
    corpus.check_finite()?;

    let dim = corpus.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(corpus, k, &mut rng);
    let threshold = config.tolerance * bounding_box_diagonal(corpus);

    let mut assignment = vec![0usize; corpus.len()];
    let mut dist = vec![0f32; corpus.len()];
    for _ in 0..config.max_iterations {
        for (i, v) in corpus.rows().enumerate() {
            let (c, d) = nearest_centroid(&centroids, v);
            assignment[i] = c;
            dist[i] = d;
        }

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &c) in corpus.rows().zip(&assignment) {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
                *s += *x as f64;
            }
        }

        let mut next = Vec::with_capacity(k * dim);
        let mut taken = vec![false; corpus.len()];
        for c in 0..k {
            if counts[c] == 0 {
                // reseed to the point worst served by its current centroid
                let far = (0..corpus.len())
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |best, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("corpus.len() >= k guarantees a free point");
                taken[far] = true;
                dist[far] = 0.0;
                next.extend_from_slice(corpus.row(far));
            } else {
                let n = counts[c] as f64;
                next.extend(sums[c * dim..(c + 1) * dim].iter().map(|s| (s / n) as f32));
            }
        }
        let next = VectorSet::from_flat(dim, next)?;

        let shift = centroids
            .rows()
            .zip(next.rows())
            .map(|(a, b)| (l2_squared(a, b) as f64).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < threshold {
            break;
        }
    }
    CentroidIndex::new(centroids)
}

fn seed_plus_plus(corpus: &VectorSet, k: usize, rng: &mut ChaCha8Rng) -> VectorSet {
    let n = corpus.len();
    let mut centroids = VectorSet::new(corpus.dim());
    let first = rng.random_range(0..n);
    centroids.push(corpus.row(first)).unwrap();

    let mut weight: Vec<f64> = corpus
        .rows()
        .map(|v| l2_squared(v, corpus.row(first)) as f64)
        .collect();
    while centroids.len() < k {
        let total: f64 = weight.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in weight.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // fewer distinct points than k; the empty-cluster repair sorts it out
            rng.random_range(0..n)
        };
        let c = corpus.row(pick).to_vec();
        for (w, v) in weight.iter_mut().zip(corpus.rows()) {
            *w = w.min(l2_squared(v, &c) as f64);
        }
        centroids.push(&c).unwrap();
    }
    centroids
}

fn bounding_box_diagonal(corpus: &VectorSet) -> f64 {
    let dim = corpus.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for v in corpus.rows() {
        for (j, x) in v.iter().enumerate() {
            lo[j] = lo[j].min(*x as f64);
            hi[j] = hi[j].max(*x as f64);
        }
    }
    lo.iter()
        .zip(&hi)
        .map(|(l, h)| (h - l).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let corpus =
            VectorSet::from_rows(2, [[1.0, 2.0], [3.0, -2.0], [5.0, 6.0], [-1.0, 0.5]]).unwrap();
        let idx = train_kmeans(&corpus, 1, 7).unwrap();
        let c = idx.centroid(0);
        assert!((c[0] - 2.0).abs() < 1e-6);
        assert!((c[1] - 1.625).abs() < 1e-6);
    }

    #[test]
    fn square_corners_are_fixed_points() {
        let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let corpus = VectorSet::from_rows(2, corners).unwrap();
        for seed in 0..10 {
            let idx = train_kmeans(&corpus, 4, seed).unwrap();
            let mut got: Vec<[f32; 2]> = idx.centroids().rows().map(|r| [r[0], r[1]]).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want = corners.to_vec();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want, "seed {seed}");
        }
    }

    #[test]
    fn rejects_small_or_non_finite_corpus() {
        let corpus = VectorSet::from_rows(1, [[0.0], [1.0]]).unwrap();
        assert!(matches!(train_kmeans(&corpus, 3, 0), Err(Error::InvalidArgument(_))));
        let bad = VectorSet::from_rows(1, [[0.0], [f32::INFINITY]]).unwrap();
        assert!(matches!(train_kmeans(&bad, 1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn duplicate_points_do_not_leave_empty_clusters() {
        let corpus = VectorSet::from_rows(1, [[0.0], [0.0], [0.0], [5.0], [9.0]]).unwrap();
        let idx = train_kmeans(&corpus, 3, 1).unwrap();
        let assigned = super::super::assign_vectors(&corpus, &idx).unwrap();
        for c in 0..3 {
            assert!(assigned.contains(&c), "cluster {c} empty: {assigned:?}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let corpus = VectorSet::from_flat(
            3,
            (0..300).map(|i| ((i * 7919) % 101) as f32 / 10.0).collect(),
        )
        .unwrap();
        let a = train_kmeans(&corpus, 5, 42).unwrap();
        let b = train_kmeans(&corpus, 5, 42).unwrap();
        assert_eq!(a, b);
    }
}
