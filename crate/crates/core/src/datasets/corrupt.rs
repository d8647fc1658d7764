//! Robustness corruptions applied to the partial cloud.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CompletionSample, CorruptionSpec};
use crate::cloud::nn::{knn_all, NnBackend};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Replaces `⌊f·|X|⌋` randomly chosen partial points with uniform samples
/// from the partial's bounding box grown by 10% of its extent (5% per side).
pub fn make_noisy(s: &CompletionSample, spec: &CorruptionSpec) -> Result<CompletionSample> {
    spec.validate()?;
    let n = s.partial.len();
    let count = (spec.noise_fraction * n as f64).floor() as usize;
    if count == 0 {
        return Ok(s.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = s.partial.bounds();
    let pad = [0, 1, 2].map(|k| 0.05 * (hi[k] - lo[k]));
    let mut pts = s.partial.points().to_vec();
    for i in index::sample(&mut rng, n, count) {
        pts[i] = [0, 1, 2].map(|k| {
            let (a, b) = (lo[k] - pad[k], hi[k] + pad[k]);
            if b > a {
                rng.gen_range(a..b)
            } else {
                a
            }
        });
    }
    Ok(CompletionSample {
        partial: PointCloud::new(pts)?,
        ..s.clone()
    })
}

/// Indices removed by [`make_missing`]: the seed point and its
/// `⌈m·n⌉ - 1` nearest neighbours. Returns `(seed, removed)`.
pub fn missing_region(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<(usize, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::domain(format!("missing fraction must lie in [0, 1), got {fraction}")));
    }
    let n = cloud.len();
    let count = (fraction * n as f64).ceil() as usize;
    if count >= n {
        return Err(Error::domain(format!(
            "missing fraction {fraction} would remove all {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = rng.gen_range(0..n);
    if count == 0 {
        return Ok((center, Vec::new()));
    }
    let q = [cloud.points()[center]];
    let removed = knn_all(cloud.points(), &q, count, NnBackend::Auto)
        .remove(0)
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    Ok((center, removed))
}

/// Deletes the region of `⌈m·|X|⌉` points closest to a random seed point,
/// then restores `|X|` by duplicating survivors.
pub fn make_missing(s: &CompletionSample, spec: &CorruptionSpec) -> Result<CompletionSample> {
    spec.validate()?;
    let (_, removed) = missing_region(&s.partial, spec.missing_fraction, spec.seed)?;
    if removed.is_empty() {
        return Ok(s.clone());
    }
    let mut keep = vec![true; s.partial.len()];
    for &i in &removed {
        keep[i] = false;
    }
    let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    let partial = s.partial.select(&idx).resample(s.partial.len())?;
    Ok(CompletionSample {
        partial,
        ..s.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth::sample_surface, ShapeKind};
    use std::collections::HashSet;

    fn sample(n: usize) -> CompletionSample {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let complete = sample_surface(ShapeKind::Sphere, n, &mut rng);
        CompletionSample {
            partial: complete.clone(),
            complete,
            label: "sphere".into(),
            id: "t".into(),
        }
    }

    fn changed(a: &PointCloud, b: &PointCloud) -> usize {
        a.points().iter().zip(b.points()).filter(|(p, q)| p != q).count()
    }

    #[test]
    fn noise_replaces_floor_fraction() {
        let s = sample(2048);
        let noisy = make_noisy(&s, &CorruptionSpec::noise(0.35, 1)).unwrap();
        assert_eq!(changed(&s.partial, &noisy.partial), 716);
        assert_eq!(noisy.complete, s.complete);
        let (lo, hi) = s.partial.bounds();
        for p in noisy.partial.points() {
            for k in 0..3 {
                let pad = 0.05 * (hi[k] - lo[k]) + 1e-12;
                assert!(p[k] >= lo[k] - pad && p[k] <= hi[k] + pad);
            }
        }
        assert_eq!(noisy, make_noisy(&s, &CorruptionSpec::noise(0.35, 1)).unwrap());
        assert_eq!(make_noisy(&s, &CorruptionSpec::noise(0.0, 1)).unwrap(), s);
    }

    #[test]
    fn missing_keeps_half_distinct_points() {
        let s = sample(2048);
        let out = make_missing(&s, &CorruptionSpec::missing(0.5, 3)).unwrap();
        assert_eq!(out.partial.len(), 2048);
        assert_eq!(out.complete, s.complete);
        let distinct: HashSet<[u64; 3]> = out
            .partial
            .points()
            .iter()
            .map(|p| p.map(f64::to_bits))
            .collect();
        assert_eq!(distinct.len(), 1024);
        assert_eq!(make_missing(&s, &CorruptionSpec::missing(0.0, 3)).unwrap(), s);
    }

    #[test]
    fn missing_region_is_connected() {
        let s = sample(1024);
        let (seed, removed) = missing_region(&s.partial, 0.3, 8).unwrap();
        assert!(removed.contains(&seed));
        let set: HashSet<usize> = removed.iter().copied().collect();
        let pts = s.partial.points();
        let queries: Vec<_> = removed.iter().map(|&i| pts[i]).collect();
        let nbrs = knn_all(pts, &queries, 9, NnBackend::Auto);
        for (&i, row) in removed.iter().zip(&nbrs) {
            if i == seed {
                continue;
            }
            assert!(row.iter().any(|&(j, _)| j != i && set.contains(&j)), "point {i} is isolated");
        }
    }

    #[test]
    fn full_removal_is_rejected() {
        let s = sample(64);
        assert!(make_missing(&s, &CorruptionSpec::missing(1.0, 0)).is_err());
        assert!(make_noisy(&s, &CorruptionSpec::noise(1.5, 0)).is_err());
        let all = make_noisy(&s, &CorruptionSpec::noise(1.0, 0)).unwrap();
        assert_eq!(changed(&s.partial, &all.partial), 64);
    }
}
