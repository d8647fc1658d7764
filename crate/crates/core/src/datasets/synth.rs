//! Synthetic shapes for desk-scale training and tests.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CompletionSample, ShapeKind};
use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

pub const RESOLUTIONS: [usize; 3] = [512, 1024, 2048];

/// Minimum share of points a cut must keep before it is accepted.
const MIN_KEPT: f64 = 0.125;

/// `n` points uniform on the surface of `kind`.
pub fn sample_surface(kind: ShapeKind, n: usize, rng: &mut impl Rng) -> PointCloud {
    let pts = (0..n).map(|_| surface_point(kind, rng)).collect();
    PointCloud::new(pts).expect("synthetic points are finite and non-empty")
}

fn surface_point(kind: ShapeKind, rng: &mut impl Rng) -> Point {
    match kind {
        ShapeKind::Sphere => {
            let d = random_direction(rng);
            d.map(|v| 0.5 * v)
        }
        ShapeKind::Cube => {
            let face = rng.gen_range(0..6);
            let axis = face / 2;
            let mut p = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            p[axis] = if face % 2 == 0 { -0.5 } else { 0.5 };
            p
        }
        ShapeKind::Cylinder => {
            // Side area π, each cap π/4 (radius 0.5, height 1).
            let u: f64 = rng.gen_range(0.0..1.5);
            let theta = rng.gen_range(0.0..2.0 * PI);
            if u < 1.0 {
                [0.5 * theta.cos(), 0.5 * theta.sin(), rng.gen_range(-0.5..0.5)]
            } else {
                let r = 0.5 * rng.gen::<f64>().sqrt();
                let z = if u < 1.25 { -0.5 } else { 0.5 };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        ShapeKind::PlanePair => {
            let z = if rng.gen::<bool>() { 0.25 } else { -0.25 };
            [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), z]
        }
    }
}

fn random_direction(rng: &mut impl Rng) -> Point {
    loop {
        let v: Point = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Points on the negative side of the plane through the centroid with the
/// given normal, in their original order.
pub fn half_space_cut(cloud: &PointCloud, normal: Point) -> Vec<Point> {
    let c = cloud.centroid();
    cloud
        .points()
        .iter()
        .copied()
        .filter(|p| (0..3).map(|k| (p[k] - c[k]) * normal[k]).sum::<f64>() < 0.0)
        .collect()
}

/// `n` samples cycling through `kinds`. Complete clouds have `resolution`
/// points; partials keep one side of a random plane through the centroid,
/// resampled to `resolution / 2`.
pub fn synth_shapes(n: usize, kinds: &[ShapeKind], resolution: usize, seed: u64) -> Result<Vec<CompletionSample>> {
    if kinds.is_empty() {
        return Err(Error::domain("at least one shape kind is required"));
    }
    if !RESOLUTIONS.contains(&resolution) {
        return Err(Error::domain(format!(
            "synthetic resolution must be one of {RESOLUTIONS:?}, got {resolution}"
        )));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let kind = kinds[i % kinds.len()];
            let complete = sample_surface(kind, resolution, &mut rng);
            let kept = loop {
                let kept = half_space_cut(&complete, random_direction(&mut rng));
                if kept.len() as f64 >= MIN_KEPT * resolution as f64 {
                    break kept;
                }
            };
            let partial = PointCloud::new(kept)?.resample(resolution / 2)?;
            Ok(CompletionSample {
                partial,
                complete,
                label: kind.name().to_string(),
                id: format!("synth-{seed}-{i:06}"),
            })
        })
        .collect()
}
