//! Point-cloud types, neighbor search, sampling, metrics and file IO.

pub mod io;
pub mod metrics;
pub mod nn;
pub mod sampling;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub use metrics::{
    chamfer_l2, chamfer_sqrt_one_sided, emd_approx, evaluate, f_score, MetricReport,
    DEFAULT_F_SCORE_TAU,
};
pub use sampling::{farthest_point_sample, fps_indices, knn_group, KnnGroups};

pub type Point = [f64; 3];

/// Ordered set of 3D points with optional per-point features.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    features: Option<Matrix>,
}

impl PointCloud {
    /// Rejects empty clouds and non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::non_finite(format!("point cloud coordinate at index {i}")));
        }
        Ok(Self {
            points,
            features: None,
        })
    }

    pub fn with_features(mut self, features: Matrix) -> Result<Self> {
        if features.rows() != self.points.len() {
            return Err(Error::shape(
                "point features",
                format!("{} rows", self.points.len()),
                format!("{} rows", features.rows()),
            ));
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Build from an `n×3` matrix.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.cols() != 3 {
            return Err(Error::shape("point matrix", "3 columns", m.cols()));
        }
        Self::new((0..m.rows()).map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2)]).collect())
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.features.as_ref()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|x| x / n)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    pub fn translated(&self, t: Point) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
            features: self.features.clone(),
        }
    }

    /// Points (and features) at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            features: self.features.as_ref().map(|f| f.gather_rows(idx)),
        }
    }

    /// Resize to exactly `n` points: cyclic duplication when growing,
    /// farthest-point sampling when shrinking. Deterministic.
    pub fn resample(&self, n: usize) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::domain("cannot resample to zero points"));
        }
        let m = self.len();
        if n == m {
            return Ok(self.clone());
        }
        if n > m {
            let idx: Vec<usize> = (0..n).map(|i| i % m).collect();
            return Ok(self.select(&idx));
        }
        let seed = sampling::farthest_from_centroid(&self.points);
        Ok(self.select(&fps_indices(&self.points, n, seed)?))
    }

    /// Translate to the origin-centred bounding box and scale its longest
    /// side to 1, so every point lies in `[-0.5, 0.5]³`.
    pub fn normalized(&self) -> PointCloud {
        let (lo, hi) = self.bounds();
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        // Input that is already normalized up to rounding passes through
        // untouched, which makes normalization idempotent bitwise.
        if center.iter().all(|c| c.abs() <= 1e-12) && (extent - 1.0).abs() <= 1e-12 {
            return self.clone();
        }
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - center[k]) * scale))
                .collect(),
            features: self.features.clone(),
        }
    }
}

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: Point,
}

impl RigidTransform {
    /// Validates `RᵀR = I` and `det R = +1` within 1e-6.
    pub fn new(rotation: [[f64; 3]; 3], translation: Point) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::domain("rotation is not orthonormal"));
                }
            }
        }
        let r = &rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("rotation determinant {det} is not +1")));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("transform translation"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: Point) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians about the (normalized) `axis`.
    pub fn from_axis_angle(axis: Point, angle: f64, translation: Point) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::domain("rotation axis must be non-zero"));
        }
        let [x, y, z] = axis.map(|a| a / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let rotation = [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ];
        Self::new(rotation, translation)
    }

    /// Uniformly random rotation (via a random unit quaternion) plus a
    /// translation with coordinates in `[-scale, scale]`.
    pub fn random(rng: &mut impl Rng, translation_scale: f64) -> Self {
        let q: [f64; 4] = loop {
            let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                break q.map(|x| x / n);
            }
        };
        let [w, x, y, z] = q;
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let translation =
            [0; 3].map(|_| rng.gen_range(-translation_scale..=translation_scale));
        Self::new(rotation, translation).expect("quaternion rotation is orthonormal")
    }

    pub fn rotation_matrix(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation_vector(&self) -> Point {
        self.translation
    }

    pub fn apply_point(&self, p: Point) -> Point {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }
}

/// Map every point through `t`. Features are carried along unchanged.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| t.apply_point(p)).collect(),
        features: cloud.features.clone(),
    }
}

#[inline]
pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
