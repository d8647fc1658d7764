//! Training objective of the variational path:
//! `L = λ_KL(KL(q‖N) + KL(p‖q)) + Σ λ·CD + λ_p·CD′(· → Y)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cloud::{chamfer_l2, chamfer_sqrt_one_sided, PointCloud};
use crate::error::{Error, Result};
use crate::latent::{kl_between, kl_between_graph, kl_to_standard_normal, kl_to_standard_normal_graph, GaussianLatent, GaussianVars};

/// Cloud scored by the one-sided partial-matching term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialTarget {
    /// The fused output `Y_out`.
    #[default]
    Output,
    /// The refined coarse cloud `G_p^c` of the local refinement module.
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub coarse: f64,
    pub fine: f64,
    pub partial: f64,
    /// `λ_o` at epoch 0.
    pub out_start: f64,
    pub out_end: f64,
    /// Epochs over which `λ_o` ramps linearly from start to end.
    pub out_ramp_epochs: usize,
    pub partial_target: PartialTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl: 20.0,
            coarse: 10.0,
            fine: 1.0,
            partial: 0.5,
            out_start: 0.01,
            out_end: 1.0,
            out_ramp_epochs: 100,
            partial_target: PartialTarget::Output,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.kl", self.kl),
            ("loss.coarse", self.coarse),
            ("loss.fine", self.fine),
            ("loss.partial", self.partial),
            ("loss.out_start", self.out_start),
            ("loss.out_end", self.out_end),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if self.out_end < self.out_start {
            return Err(Error::config("loss.out_end", "must not be below loss.out_start"));
        }
        Ok(())
    }

    /// `λ_o` for this schedule at `epoch`.
    pub fn out_at(&self, epoch: usize) -> f64 {
        if self.out_ramp_epochs == 0 || epoch >= self.out_ramp_epochs {
            return self.out_end;
        }
        self.out_start + (self.out_end - self.out_start) * epoch as f64 / self.out_ramp_epochs as f64
    }
}

/// Default `λ_o` schedule: 0.01 at epoch 0, linear to 1.0 at epoch 100.
pub fn lambda_o_at(epoch: usize) -> f64 {
    LossWeights::default().out_at(epoch)
}

/// `λ_KL · (KL(q_Y ‖ N(0, I)) + KL(p_X ‖ q_Y))`.
pub fn loss_kl(q_y: &GaussianLatent, p_x: &GaussianLatent, lambda_kl: f64) -> Result<f64> {
    Ok(lambda_kl * (kl_to_standard_normal(q_y) + kl_between(p_x, q_y)?))
}

/// `λ_c·CD(Y_v^c, Y) + λ_f·CD(Y_v, Y) + λ_o·CD(Y_out, Y)`.
pub fn loss_cd(
    coarse: &PointCloud,
    fine: &PointCloud,
    out: &PointCloud,
    y: &PointCloud,
    weights: [f64; 3],
) -> Result<f64> {
    Ok(weights[0] * chamfer_l2(coarse, y)? + weights[1] * chamfer_l2(fine, y)? + weights[2] * chamfer_l2(out, y)?)
}

/// `λ_p · Σ_{p ∈ P} min_{q ∈ Y} ‖p − q‖`.
pub fn loss_partial(p: &PointCloud, y: &PointCloud, lambda_p: f64) -> Result<f64> {
    Ok(lambda_p * chamfer_sqrt_one_sided(p, y)?)
}

/// Unweighted components and weighted total of one training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kl_adv: f64,
    pub kl_var: f64,
    pub cd_coarse: f64,
    pub cd_fine: f64,
    pub cd_out: f64,
    pub partial: f64,
    pub total: f64,
    pub epoch: usize,
}

impl LossReport {
    /// Weighted sum of the components under `w` at this report's epoch.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.kl * (self.kl_adv + self.kl_var)
            + w.coarse * self.cd_coarse
            + w.fine * self.cd_fine
            + w.out_at(self.epoch) * self.cd_out
            + w.partial * self.partial
    }

    /// Component-wise mean of several reports (the epoch of the first).
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            kl_adv: sum(|r| r.kl_adv),
            kl_var: sum(|r| r.kl_var),
            cd_coarse: sum(|r| r.cd_coarse),
            cd_fine: sum(|r| r.cd_fine),
            cd_out: sum(|r| r.cd_out),
            partial: sum(|r| r.partial),
            total: sum(|r| r.total),
            epoch: reports.first().map_or(0, |r| r.epoch),
        }
    }
}

/// Graph nodes feeding the training loss.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub q_y: GaussianVars,
    pub p_x: GaussianVars,
    pub coarse: Var,
    pub fine: Var,
    pub out: Var,
    /// `G_p^c`, used when the partial term targets the refined cloud.
    pub refined: Var,
    pub target: Var,
}

/// Builds the scalar training loss and reports its parts.
pub fn training_loss(g: &mut Graph, x: LossInputs, w: &LossWeights, epoch: usize) -> (Var, LossReport) {
    let kl_adv = kl_to_standard_normal_graph(g, x.q_y);
    let kl_var = kl_between_graph(g, x.p_x, x.q_y);
    let cd_coarse = g.chamfer(x.coarse, x.target);
    let cd_fine = g.chamfer(x.fine, x.target);
    let cd_out = g.chamfer(x.out, x.target);
    let src = match w.partial_target {
        PartialTarget::Output => x.out,
        PartialTarget::Refined => x.refined,
    };
    let partial = g.directed_distance(src, x.target);
    let terms = [
        (kl_adv, w.kl),
        (kl_var, w.kl),
        (cd_coarse, w.coarse),
        (cd_fine, w.fine),
        (cd_out, w.out_at(epoch)),
        (partial, w.partial),
    ];
    let mut total = None;
    for (v, lambda) in terms {
        let t = g.scale(v, lambda);
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t),
        });
    }
    let total = total.expect("six terms");
    let val = |g: &Graph, v: Var| g.value(v).item();
    let report = LossReport {
        kl_adv: val(g, kl_adv),
        kl_var: val(g, kl_var),
        cd_coarse: val(g, cd_coarse),
        cd_fine: val(g, cd_fine),
        cd_out: val(g, cd_out),
        partial: val(g, partial),
        total: val(g, total),
        epoch,
    };
    (total, report)
}
