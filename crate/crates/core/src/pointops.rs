//! Graph building blocks shared by the point networks.

use crate::autodiff::{Graph, Var};
use crate::cloud::nn::{knn_all, matrix_points, NnBackend};

const IDW_EPS: f64 = 1e-8;

/// Flattened `queries × k` nearest-neighbor indices into `data` (both `n×3`
/// nodes), computed on current values.
pub(crate) fn knn_indices(g: &Graph, data: Var, queries: Var, k: usize) -> Vec<usize> {
    let d = matrix_points(g.value(data));
    let q = matrix_points(g.value(queries));
    knn_all(&d, &q, k, NnBackend::Auto)
        .into_iter()
        .flat_map(|row| row.into_iter().map(|(i, _)| i))
        .collect()
}

/// Inverse-squared-distance weighted average of `feats` (rows aligned with
/// `src`) over the `k` nearest `src` points of every query. The weights are
/// built from graph ops, so gradients reach both point sets.
pub(crate) fn idw_interpolate(g: &mut Graph, src: Var, feats: Var, queries: Var, k: usize) -> Var {
    let k = k.min(g.shape(src).0);
    let nbr = knn_indices(g, src, queries, k);
    let qe = g.repeat_rows(queries, k);
    let pe = g.gather(src, nbr.clone());
    let diff = g.sub(qe, pe);
    let d2 = g.square(diff);
    let d2 = g.sum_cols(d2);
    let d2 = g.add_scalar(d2, IDW_EPS);
    let w = g.recip(d2);
    let wsum = g.group_sum(w, k);
    let inv = g.recip(wsum);
    let inv = g.repeat_rows(inv, k);
    let w = g.mul(w, inv);
    let fe = g.gather(feats, nbr);
    let weighted = g.mul_col(fe, w);
    g.group_sum(weighted, k)
}

/// Mean of each row's `k` nearest rows (by the coordinates in `points`).
pub(crate) fn knn_mean(g: &mut Graph, points: Var, feats: Var, k: usize) -> Var {
    let k = k.min(g.shape(points).0);
    if k == 1 {
        return feats;
    }
    let nbr = knn_indices(g, points, points, k);
    let fe = g.gather(feats, nbr);
    g.group_mean(fe, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Matrix;

    #[test]
    fn interpolation_reproduces_features_at_source_points() {
        let mut g = Graph::new();
        let src = g.constant(Matrix::from_rows(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]));
        let f = g.constant(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let out = idw_interpolate(&mut g, src, f, src, 3);
        for (a, b) in g.value(out).data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        let mid = g.constant(Matrix::from_rows(&[[0.5, 0.0, 0.0]]));
        let out = idw_interpolate(&mut g, src, f, mid, 2);
        assert!((g.value(out).item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn knn_mean_with_one_neighbor_is_identity() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::from_rows(&[[0.0; 3], [1.0, 0.0, 0.0]]));
        let f = g.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(knn_mean(&mut g, p, f, 1), f);
        let m = knn_mean(&mut g, p, f, 2);
        assert_eq!(g.value(m).data(), &[2.0, 3.0, 2.0, 3.0]);
    }
}
