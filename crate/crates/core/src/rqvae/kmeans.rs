//! k-means with k-means++ seeding, used to initialize codebooks.

use log::warn;
use rand::Rng;

use crate::numcore::{argmin, sq_dist_rows, Tensor};

/// Nearest row of `centroids` for every row of `points`; ties go to the
/// smallest index.
pub fn nearest(points: &Tensor, centroids: &Tensor) -> Vec<usize> {
    let d = sq_dist_rows(points, centroids).expect("matching widths");
    (0..d.rows()).map(|i| argmin(d.row(i))).collect()
}

/// Runs `iters` Lloyd iterations from a k-means++ seeding and returns the
/// `k x d` centroid matrix.
///
/// Fewer than `k` points are resampled with replacement up to `k`. Empty
/// clusters are reseeded from the point farthest from its centroid.
pub fn kmeans(points: &Tensor, k: usize, iters: usize, rng: &mut impl Rng) -> Tensor {
    assert!(k >= 1 && !points.is_empty(), "kmeans needs points and k >= 1");
    let points = if points.rows() < k {
        warn!(
            "k-means: {} points for {k} clusters, sampling with replacement",
            points.rows()
        );
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..points.rows())).collect();
        points.select_rows(&idx)
    } else {
        points.clone()
    };
    let mut centroids = seed_plus_plus(&points, k, rng);
    for _ in 0..iters {
        let assign = nearest(&points, &centroids);
        let mut sums = Tensor::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.rows()];
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / n;
                }
                continue;
            }
            // Farthest point from its own centroid that has not been used yet.
            let mut best: Option<(usize, f64)> = None;
            for (i, &a) in assign.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let d: f64 = points
                    .row(i)
                    .iter()
                    .zip(centroids.row(a))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if best.is_none_or(|(_, bd)| d > bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, _)) = best {
                taken[i] = true;
                centroids.row_mut(c).copy_from_slice(points.row(i));
            }
        }
    }
    centroids
}

fn seed_plus_plus(points: &Tensor, k: usize, rng: &mut impl Rng) -> Tensor {
    let n = points.rows();
    let mut centroids = Tensor::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq(points.row(i), points.row(first))).collect();
    let mut warned = false;
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            if !warned {
                warn!("k-means: all points coincide with existing centroids, duplicating codewords");
                warned = true;
            }
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn k_points_k_clusters_recovers_points() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 4.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = kmeans(&pts, 3, 10, &mut rng);
        let mut got: Vec<Vec<f64>> = (0..3).map(|i| c.row(i).to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<Vec<f64>> = (0..3).map(|i| pts.row(i).to_vec()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_blobs_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let means = [[-4.0, 2.0], [4.0, -1.0]];
        let mut rows = Vec::new();
        for i in 0..400 {
            let m = means[i % 2];
            rows.push(vec![m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]);
        }
        let pts = Tensor::from_rows(&rows).unwrap();
        let c = kmeans(&pts, 2, 20, &mut rng);
        for m in means {
            let best = (0..2)
                .map(|j| sq(c.row(j), &m).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "centroid {best} away from {m:?}");
        }
    }

    #[test]
    fn degenerate_batch_gives_equal_codewords() {
        let pts = Tensor::filled(6, 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = kmeans(&pts, 4, 5, &mut rng);
        assert!(c.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fewer_points_than_clusters() {
        let pts = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = kmeans(&pts, 5, 5, &mut rng);
        assert_eq!(c.shape(), (5, 1));
        assert!(c.data().iter().all(|&v| v == 1.0 || v == 2.0));
    }

    #[test]
    fn nearest_prefers_lowest_index_on_ties() {
        let c = Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.0], vec![-0.9]]).unwrap();
        assert_eq!(nearest(&p, &c), vec![0, 1]);
    }
}
