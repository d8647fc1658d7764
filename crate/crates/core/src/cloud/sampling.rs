//! Farthest point sampling and k-nearest-neighbor grouping.

use super::nn::{knn_all, NnBackend};
use super::{sq_dist, Point, PointCloud};
use crate::error::{Error, Result};

/// Greedy max-min subsampling starting from `seed_index`. Ties pick the
/// lowest index.
pub fn fps_indices(points: &[Point], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::domain(format!(
            "farthest point sampling needs 1 <= k <= {n}, got k = {k}"
        )));
    }
    if seed_index >= n {
        return Err(Error::domain(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    for _ in 0..k {
        selected.push(current);
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        // Already-selected points have distance 0; once everything left is
        // a duplicate the argmax can land on a chosen index, so fall back to
        // the lowest unselected one to keep the output a set of k indices.
        current = if best_d > 0.0 {
            best
        } else {
            match (0..n).find(|i| !selected.contains(i)) {
                Some(i) => i,
                None => break,
            }
        };
    }
    Ok(selected)
}

/// Subsample `cloud` to `k` points by farthest point sampling.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<PointCloud> {
    Ok(cloud.select(&fps_indices(cloud.points(), k, seed_index)?))
}

/// Index of the point farthest from the centroid (lowest index on ties).
/// Used as an order-independent FPS seed.
pub fn farthest_from_centroid(points: &[Point]) -> usize {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = sq_dist(p, &c);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// `centers × k` neighbor indices, each row ascending by distance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGroups {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl KnnGroups {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn num_groups(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }
}

/// The `k` nearest points of `data` for every center.
pub fn knn_group_points(data: &[Point], centers: &[Point], k: usize) -> Result<KnnGroups> {
    knn_group_with(data, centers, k, NnBackend::Auto)
}

pub fn knn_group_with(
    data: &[Point],
    centers: &[Point],
    k: usize,
    backend: NnBackend,
) -> Result<KnnGroups> {
    if k == 0 || k > data.len() {
        return Err(Error::domain(format!(
            "knn grouping needs 1 <= k <= {}, got k = {k}",
            data.len()
        )));
    }
    let indices = knn_all(data, centers, k, backend)
        .into_iter()
        .flat_map(|row| row.into_iter().map(|(i, _)| i))
        .collect();
    Ok(KnnGroups { k, indices })
}

pub fn knn_group(cloud: &PointCloud, centers: &PointCloud, k: usize) -> Result<KnnGroups> {
    knn_group_points(cloud.points(), centers.points(), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n).map(|_| [0; 3].map(|_| rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn collinear_fps_selects_ends_then_middle() {
        let pts: Vec<Point> = (0..9).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(fps_indices(&pts, 3, 0).unwrap(), vec![0, 8, 4]);
    }

    #[test]
    fn fps_k_equal_n_is_permutation_and_k_one_is_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(20, &mut rng);
        let mut all = fps_indices(&pts, 20, 5).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(fps_indices(&pts, 1, 7).unwrap(), vec![7]);
    }

    #[test]
    fn fps_handles_duplicates() {
        let pts = vec![[0.0; 3]; 4];
        let mut idx = fps_indices(&pts, 4, 2).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_k_larger_than_cloud() {
        let pts = vec![[0.0; 3]; 3];
        assert!(matches!(fps_indices(&pts, 4, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn fps_selection_is_max_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(40, &mut rng);
        let sel = fps_indices(&pts, 10, 0).unwrap();
        for step in 1..sel.len() {
            let chosen = &sel[..step];
            let score = |i: usize| {
                chosen
                    .iter()
                    .map(|&c| sq_dist(&pts[i], &pts[c]))
                    .fold(f64::INFINITY, f64::min)
            };
            let best = (0..pts.len()).map(score).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(score(sel[step]), best);
        }
    }

    #[test]
    fn knn_group_self_is_nearest_and_full_k_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(16, &mut rng);
        let g = knn_group_points(&pts, &pts, 1).unwrap();
        assert_eq!(g.indices, (0..16).collect::<Vec<_>>());
        let g = knn_group_points(&pts, &pts[..3], 16).unwrap();
        for i in 0..3 {
            let mut row = g.row(i).to_vec();
            row.sort_unstable();
            assert_eq!(row, (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn knn_group_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let pts = random_points(16, &mut rng);
            let centers = random_points(4, &mut rng);
            let k = rng.gen_range(1..=16);
            let g = knn_group_points(&pts, &centers, k).unwrap();
            for (ci, c) in centers.iter().enumerate() {
                let mut all: Vec<(f64, usize)> =
                    pts.iter().enumerate().map(|(i, p)| (sq_dist(p, c), i)).collect();
                all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let expect: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
                assert_eq!(g.row(ci), expect.as_slice());
            }
        }
    }

    #[test]
    fn sampling_and_grouping_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = random_points(300, &mut rng);
        assert_eq!(fps_indices(&pts, 50, 3).unwrap(), fps_indices(&pts, 50, 3).unwrap());
        let a = knn_group_points(&pts, &pts[..40], 8).unwrap();
        let b = knn_group_points(&pts, &pts[..40], 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn knn_group_rejects_oversized_k() {
        let pts = vec![[0.0; 3]; 3];
        assert!(knn_group_points(&pts, &pts, 4).is_err());
    }
}
