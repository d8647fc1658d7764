//! Deviation score between the two completions and the threshold fusion
//! that produces `Y_out`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::cloud::nn::{nearest_all, NnBackend};
use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub threshold0: f64,
    pub decay: f64,
    pub decay_every: usize,
    /// Weight of `Y_g` in the blend branch.
    pub w_s: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            threshold0: 0.1,
            decay: 0.9,
            decay_every: 10,
            w_s: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold0 > 0.0) {
            return Err(Error::config("fusion.threshold0", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("fusion.decay", "must lie in (0, 1]"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("fusion.decay_every", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.w_s) {
            return Err(Error::config("fusion.w_s", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `S_t = S_t0 · decay^⌊epoch / decay_every⌋`.
pub fn threshold_at(epoch: usize, cfg: &FusionConfig) -> f64 {
    cfg.threshold0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Reorders `y_g` so row `i` is the `y_g` point nearest to `y_v[i]`
/// (lowest index on ties).
pub fn align_to(y_g: &PointCloud, y_v: &PointCloud) -> PointCloud {
    y_g.select(&nearest_indices(y_g.points(), y_v.points()))
}

fn nearest_indices(from: &[Point], onto: &[Point]) -> Vec<usize> {
    nearest_all(from, onto, NnBackend::Auto).into_iter().map(|(i, _)| i).collect()
}

fn centred_unit(c: &PointCloud, which: &str) -> Result<Vec<f64>> {
    let m = c.centroid();
    let v: Vec<f64> = c
        .points()
        .iter()
        .flat_map(|p| [p[0] - m[0], p[1] - m[1], p[2] - m[2]])
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::domain(format!("{which} has zero norm after centring")));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Cosine distance `1 − cos` between the centred, L2-normalized, flattened
/// clouds. Rows are compared index by index; see [`align_to`].
pub fn deviation(y_g: &PointCloud, y_v: &PointCloud) -> Result<f64> {
    if y_g.len() != y_v.len() {
        return Err(Error::domain(format!(
            "deviation needs equal sizes, got {} and {}",
            y_g.len(),
            y_v.len()
        )));
    }
    let a = centred_unit(y_g, "Y_g")?;
    let b = centred_unit(y_v, "Y_v")?;
    // For unit vectors 1 − cos = ‖a − b‖² / 2, which is exact at a = b.
    let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((0.5 * d2).clamp(0.0, 2.0))
}

/// Which rule of [`fuse`] applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionBranch {
    /// `S < S_t`: keep `Y_v`.
    Keep,
    /// `S ≥ S_t`: blend matched pairs.
    Blend,
}

pub fn branch(s: f64, s_t: f64) -> FusionBranch {
    if s < s_t {
        FusionBranch::Keep
    } else {
        FusionBranch::Blend
    }
}

fn check_args(s: f64, s_t: f64, w_s: f64) -> Result<()> {
    if !(s >= 0.0 && s_t >= 0.0) {
        return Err(Error::domain(format!("fusion needs S, S_t ≥ 0, got {s} and {s_t}")));
    }
    if !(0.0..=1.0).contains(&w_s) {
        return Err(Error::domain(format!("fusion weight must lie in [0, 1], got {w_s}")));
    }
    Ok(())
}

/// `Y_out`: `Y_v` when `S < S_t`, otherwise `w_s·Y_g + (1 − w_s)·Y_v` with
/// each `Y_v` point paired to its nearest `Y_g` point. `|Y_out| = |Y_v|`.
pub fn fuse(y_g: &PointCloud, y_v: &PointCloud, s: f64, s_t: f64, w_s: f64) -> Result<PointCloud> {
    check_args(s, s_t, w_s)?;
    if branch(s, s_t) == FusionBranch::Keep {
        return Ok(y_v.clone());
    }
    let m = nearest_indices(y_g.points(), y_v.points());
    let pts = y_v
        .points()
        .iter()
        .zip(&m)
        .map(|(v, &j)| {
            let gp = y_g.points()[j];
            [0, 1, 2].map(|k| w_s * gp[k] + (1.0 - w_s) * v[k])
        })
        .collect();
    PointCloud::new(pts)
}

/// Graph form of [`fuse`] with `Y_g` held constant, so gradients reach
/// `Y_v` only.
pub fn fuse_graph(g: &mut Graph, y_g: &Matrix, y_v: Var, s: f64, s_t: f64, w_s: f64) -> Result<Var> {
    check_args(s, s_t, w_s)?;
    if branch(s, s_t) == FusionBranch::Keep {
        return Ok(y_v);
    }
    let gp = crate::cloud::nn::matrix_points(y_g);
    let vp = crate::cloud::nn::matrix_points(g.value(y_v));
    let m = nearest_indices(&gp, &vp);
    let matched = y_g.gather_rows(&m);
    let matched = g.constant(matched.map(|x| w_s * x));
    let keep = g.scale(y_v, 1.0 - w_s);
    Ok(g.add(matched, keep))
}
