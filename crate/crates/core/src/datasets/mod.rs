//! Completion samples, benchmark archives, corruptions and synthetic shapes.

pub mod archive;
pub mod corrupt;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

pub use archive::{load_archive, write_archive, ArchiveStream};
pub use corrupt::{make_missing, make_noisy, missing_region};
pub use synth::{sample_surface, synth_shapes};

/// Slack allowed when checking that a complete cloud lies in the unit cube.
pub const CUBE_TOLERANCE: f64 = 1e-6;

/// A partial observation `X` and its ground-truth shape `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionSample {
    pub partial: PointCloud,
    pub complete: PointCloud,
    pub label: String,
    pub id: String,
}

impl CompletionSample {
    /// Checks `|X| ≤ |Y|` and that `Y` lies in `[-0.5, 0.5]³`.
    pub fn validate(&self) -> Result<()> {
        if self.partial.len() > self.complete.len() {
            return Err(Error::shape(
                format!("sample {}", self.id),
                format!("at most {} partial points", self.complete.len()),
                self.partial.len(),
            ));
        }
        if !in_unit_cube(&self.complete) {
            return Err(Error::domain(format!(
                "sample {}: complete cloud leaves the unit cube",
                self.id
            )));
        }
        Ok(())
    }

    /// Applies to both clouds the similarity that normalizes `Y`, so the
    /// pair stays aligned.
    pub fn normalized(&self) -> CompletionSample {
        let (lo, hi) = self.complete.bounds();
        let center = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let scale = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        let map = |c: &PointCloud| {
            let pts = c
                .points()
                .iter()
                .map(|p| [0, 1, 2].map(|k| (p[k] - center[k]) * scale))
                .collect();
            PointCloud::new(pts).expect("scaling keeps points finite")
        };
        CompletionSample {
            partial: map(&self.partial),
            complete: map(&self.complete),
            label: self.label.clone(),
            id: self.id.clone(),
        }
    }
}

pub(crate) fn in_unit_cube(c: &PointCloud) -> bool {
    c.points()
        .iter()
        .all(|p| p.iter().all(|v| v.abs() <= 0.5 + CUBE_TOLERANCE))
}

/// Parameters of the robustness corruptions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub noise_fraction: f64,
    pub missing_fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn noise(fraction: f64, seed: u64) -> Self {
        Self {
            noise_fraction: fraction,
            missing_fraction: 0.0,
            seed,
        }
    }

    pub fn missing(fraction: f64, seed: u64) -> Self {
        Self {
            noise_fraction: 0.0,
            missing_fraction: fraction,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("noise_fraction", self.noise_fraction), ("missing_fraction", self.missing_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::domain(format!("{name} must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Primitive families of the synthetic generator. Each is scaled to fit the
/// unit cube centred at the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    PlanePair,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::PlanePair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::PlanePair => "plane-pair",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown shape kind `{s}`")))
    }
}
