//! Chamfer, earth mover's and F-score metrics between point clouds.

use serde::{Deserialize, Serialize};

use super::nn::{nearest_all, NnBackend};
use super::{sq_dist, Point, PointCloud};
use crate::error::{Error, Result};

/// F-score distance threshold used when none is given, in unit-cube model
/// space.
pub const DEFAULT_F_SCORE_TAU: f64 = 0.001;

/// Symmetric L2 Chamfer distance: mean squared nearest-neighbor distance in
/// each direction, summed.
pub fn chamfer_l2(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    chamfer_l2_with(p, q, NnBackend::Auto)
}

pub fn chamfer_l2_with(p: &PointCloud, q: &PointCloud, backend: NnBackend) -> Result<f64> {
    nonempty(p, q)?;
    let pq = nearest_all(q.points(), p.points(), backend);
    let qp = nearest_all(p.points(), q.points(), backend);
    let a: f64 = pq.iter().map(|x| x.1).sum::<f64>() / p.len() as f64;
    let b: f64 = qp.iter().map(|x| x.1).sum::<f64>() / q.len() as f64;
    Ok(a + b)
}

/// Directed `P → Q` sum of unsquared nearest-neighbor distances.
pub fn chamfer_sqrt_one_sided(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    nonempty(p, q)?;
    Ok(nearest_all(q.points(), p.points(), NnBackend::Auto)
        .iter()
        .map(|x| x.1.sqrt())
        .sum())
}

/// Harmonic mean of precision (share of `P` strictly within `tau` of `Q`)
/// and recall (share of `Q` strictly within `tau` of `P`). Zero when both
/// are zero.
pub fn f_score(p: &PointCloud, q: &PointCloud, tau: f64) -> Result<f64> {
    nonempty(p, q)?;
    if !(tau > 0.0) {
        return Err(Error::domain(format!("F-score threshold must be positive, got {tau}")));
    }
    let within = |src: &PointCloud, dst: &PointCloud| {
        let hits = nearest_all(dst.points(), src.points(), NnBackend::Auto)
            .iter()
            .filter(|x| x.1.sqrt() < tau)
            .count();
        hits as f64 / src.len() as f64
    };
    let precision = within(p, q);
    let recall = within(q, p);
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Approximate earth mover's distance: mean Euclidean displacement under a
/// bijection found by an ε-scaling auction, one phase per iteration. Each
/// phase's assignment is polished with pairwise swaps and the best cost seen
/// so far is returned, so the value never increases with `iters` and always
/// upper-bounds the exact optimum.
pub fn emd_approx(p: &PointCloud, q: &PointCloud, iters: usize) -> Result<f64> {
    nonempty(p, q)?;
    if p.len() != q.len() {
        return Err(Error::domain(format!(
            "EMD needs equal sizes, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    if iters == 0 {
        return Err(Error::domain("EMD needs at least one iteration"));
    }
    Ok(Auction::new(p.points(), q.points()).run(iters) / p.len() as f64)
}

struct Auction<'a> {
    p: &'a [Point],
    q: &'a [Point],
    n: usize,
}

impl<'a> Auction<'a> {
    fn new(p: &'a [Point], q: &'a [Point]) -> Self {
        Self { p, q, n: p.len() }
    }

    #[inline]
    fn cost(&self, i: usize, j: usize) -> f64 {
        sq_dist(&self.p[i], &self.q[j]).sqrt()
    }

    fn total(&self, assign: &[usize]) -> f64 {
        assign.iter().enumerate().map(|(i, &j)| self.cost(i, j)).sum()
    }

    fn run(&self, iters: usize) -> f64 {
        let n = self.n;
        if n == 1 {
            return self.cost(0, 0);
        }
        let max_cost = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| self.cost(i, j))
            .fold(0.0, f64::max);
        if max_cost == 0.0 {
            return 0.0;
        }
        let mut prices = vec![0.0; n];
        let mut eps = max_cost / 4.0;
        let mut best = f64::INFINITY;
        // Bounds work per phase so that pathological instances stay cheap;
        // an unfinished phase is completed greedily.
        let bid_cap = 64 * n + 1024;
        for _ in 0..iters {
            let mut assign = self.phase(&mut prices, eps, bid_cap);
            self.polish(&mut assign);
            best = best.min(self.total(&assign));
            eps /= 4.0;
        }
        best
    }

    fn phase(&self, prices: &mut [f64], eps: f64, bid_cap: usize) -> Vec<usize> {
        let n = self.n;
        let mut owner = vec![usize::MAX; n];
        let mut assigned = vec![usize::MAX; n];
        let mut queue: std::collections::VecDeque<usize> = (0..n).collect();
        let mut bids = 0;
        while let Some(i) = queue.pop_front() {
            if bids >= bid_cap {
                queue.push_front(i);
                break;
            }
            bids += 1;
            let (mut j1, mut v1, mut v2) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let v = -self.cost(i, j) - prices[j];
                if v > v1 {
                    v2 = v1;
                    v1 = v;
                    j1 = j;
                } else if v > v2 {
                    v2 = v;
                }
            }
            prices[j1] += v1 - v2 + eps;
            let prev = owner[j1];
            owner[j1] = i;
            assigned[i] = j1;
            if prev != usize::MAX {
                assigned[prev] = usize::MAX;
                queue.push_back(prev);
            }
        }
        if !queue.is_empty() {
            let mut free: Vec<usize> = (0..n).filter(|&j| owner[j] == usize::MAX).collect();
            for i in 0..n {
                if assigned[i] == usize::MAX {
                    let (pos, _) = free
                        .iter()
                        .enumerate()
                        .min_by(|a, b| self.cost(i, *a.1).total_cmp(&self.cost(i, *b.1)))
                        .expect("a free object exists for every unassigned person");
                    assigned[i] = free.swap_remove(pos);
                }
            }
        }
        assigned
    }

    /// Pairwise exchange until no swap lowers the cost (bounded sweeps).
    fn polish(&self, assign: &mut [usize]) {
        let n = self.n;
        if n > 512 {
            return;
        }
        for _ in 0..8 {
            let mut improved = false;
            for a in 0..n {
                for b in a + 1..n {
                    let (ja, jb) = (assign[a], assign[b]);
                    let now = self.cost(a, ja) + self.cost(b, jb);
                    let swapped = self.cost(a, jb) + self.cost(b, ja);
                    if swapped < now - 1e-15 {
                        assign.swap(a, b);
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
}

fn nonempty(p: &PointCloud, q: &PointCloud) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::domain("metric requires non-empty clouds"));
    }
    Ok(())
}

/// Completion quality of a prediction against ground truth. Values are
/// stored unscaled; [`MetricReport::scaled`] gives the conventional
/// CD×10⁴ / EMD×10² reporting units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cd_l2: f64,
    pub emd: f64,
    pub f1: f64,
}

impl MetricReport {
    pub const CD_SCALE: f64 = 1e4;
    pub const EMD_SCALE: f64 = 1e2;

    /// `(cd × 10⁴, emd × 10², f1)`.
    pub fn scaled(&self) -> (f64, f64, f64) {
        (self.cd_l2 * Self::CD_SCALE, self.emd * Self::EMD_SCALE, self.f1)
    }
}

/// All three metrics. The prediction is resampled to the ground-truth size
/// before EMD.
pub fn evaluate(
    pred: &PointCloud,
    gt: &PointCloud,
    tau: f64,
    emd_iters: usize,
) -> Result<MetricReport> {
    let cd_l2 = chamfer_l2(pred, gt)?;
    let f1 = f_score(pred, gt, tau)?;
    let resized = pred.resample(gt.len())?;
    let emd = emd_approx(&resized, gt, emd_iters)?;
    Ok(MetricReport { cd_l2, emd, f1 })
}
