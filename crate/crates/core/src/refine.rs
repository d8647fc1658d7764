//! Local refinement: an upsampling transformer proposes new points around
//! patch centers, self-attention fuses them with the per-patch samples
//! `T_p`, and an interpolating upsampler merges the result with the partial
//! input into the refined coarse cloud `G_p^c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, Matrix, Mlp, ParamStore, Var};
use crate::cloud::nn::matrix_points;
use crate::cloud::sampling::{farthest_from_centroid, fps_indices};
use crate::encoder::PatchVars;
use crate::error::{Error, Result};
use crate::pointops::idw_interpolate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// New points generated per patch center.
    pub up_ratio: usize,
    /// Encoder level whose patches feed the module.
    pub level: usize,
    /// Size of `G_p^c`.
    pub coarse_size: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            up_ratio: 4,
            level: 0,
            coarse_size: 1024,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self, encoder_levels: usize) -> Result<()> {
        if self.up_ratio == 0 {
            return Err(Error::config("refine.up_ratio", "must be at least 1"));
        }
        if self.level >= encoder_levels {
            return Err(Error::config(
                "refine.level",
                format!("encoder has only {encoder_levels} levels"),
            ));
        }
        if self.coarse_size == 0 {
            return Err(Error::config("refine.coarse_size", "must be positive"));
        }
        Ok(())
    }
}

/// Output of [`UpTrans::forward`].
#[derive(Clone, Debug)]
pub struct UpTransOut {
    /// `(N_p·r) × 3`; rows `i·r .. (i+1)·r` belong to patch `i`.
    pub points: Var,
    /// `(N_p·r) × D_p`.
    pub features: Var,
    /// `(N_p·r·S_p) × 1` attention of each new point over its patch members.
    pub weights: Matrix,
    pub group_size: usize,
}

/// Upsampling transformer. For patch `i` and child `c` the query is a
/// learned child seed plus a projection of the pooled patch feature; keys
/// are member features plus a positional encoding `δ` of member offsets;
/// values are `δ` modulated element-wise by projected member features.
/// A zero-initialized head turns the aggregated feature into an offset from
/// the patch center.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpTrans {
    seeds: String,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    pos: Mlp,
    offset: Linear,
    ratio: usize,
    dim: usize,
}

impl UpTrans {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let seeds = format!("{name}.seeds");
        store.init_scaled(&seeds, ratio, dim, 1.0, rng);
        Self {
            seeds,
            wq: Linear::no_bias(store, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::no_bias(store, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::no_bias(store, &format!("{name}.v"), dim, dim, rng),
            pos: Mlp::new(store, &format!("{name}.pos"), &[3, dim, dim], rng),
            offset: Linear::zeroed(store, &format!("{name}.offset"), dim, 3),
            ratio,
            dim,
        }
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pv: &PatchVars) -> Result<UpTransOut> {
        let (n, s, r) = (pv.n_patches, pv.group_size, self.ratio);
        let (fr, fc) = g.shape(pv.features);
        if g.shape(pv.centers).0 != n || fr != n * s || g.shape(pv.rel).0 != n * s {
            return Err(Error::shape("up-transformer patches", format!("{n} patches of {s}"), format!("{fr} member rows")));
        }
        if fc != self.dim {
            return Err(Error::shape("up-transformer feature width", self.dim, fc));
        }
        let seeds = g.param(store, &self.seeds);
        let seeds = g.gather(seeds, (0..n * r).map(|i| i % r).collect());
        let q = self.wq.forward(g, store, pv.pooled);
        let q = g.repeat_rows(q, r);
        let q = g.add(q, seeds);

        let delta = self.pos.forward(g, store, pv.rel);
        let key = self.wk.forward(g, store, pv.features);
        let key = g.add(key, delta);
        let val = self.wv.forward(g, store, pv.features);
        let val = g.mul(delta, val);

        // Row (i·r + c)·s + j pairs child c of patch i with member j.
        let members: Vec<usize> = (0..n * r * s).map(|row| (row / (r * s)) * s + row % s).collect();
        let qe = g.repeat_rows(q, s);
        let ke = g.gather(key, members.clone());
        let logits = g.mul(qe, ke);
        let logits = g.sum_cols(logits);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let w = g.group_softmax(logits, s);
        let weights = g.value(w).clone();
        let ve = g.gather(val, members);
        let agg = g.mul_col(ve, w);
        let agg = g.group_sum(agg, s);
        let ctx = g.repeat_rows(pv.pooled, r);
        let features = g.add(agg, ctx);

        let off = self.offset.forward(g, store, features);
        let base = g.repeat_rows(pv.centers, r);
        let points = g.add(base, off);
        if !g.value(points).is_finite() || !g.value(features).is_finite() {
            return Err(Error::non_finite("up-transformer output"));
        }
        Ok(UpTransOut {
            points,
            features,
            weights,
            group_size: s,
        })
    }
}

/// Self-attention over all new-point tokens after adding a projection of
/// each point's patch sample row of `T_p`. Residual, with a zero-initialized
/// output projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFuse {
    wt: Linear,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    group_size: usize,
    dim: usize,
}

impl AttentionFuse {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group_size: usize, rng: &mut impl Rng) -> Self {
        Self {
            wt: Linear::no_bias(store, &format!("{name}.t"), group_size, dim, rng),
            q: Linear::no_bias(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::no_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::no_bias(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::zeroed(store, &format!("{name}.out"), dim, dim),
            group_size,
            dim,
        }
    }

    /// `up: M × D`, `t_p: N_p × S_p` with `M` a multiple of `N_p`. Returns
    /// `H_p` and the `M × M` attention matrix.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, up: Var, t_p: Var) -> Result<(Var, Matrix)> {
        let (m, d) = g.shape(up);
        let (n, s) = g.shape(t_p);
        if d != self.dim {
            return Err(Error::shape("fused feature width", self.dim, d));
        }
        if s != self.group_size || n == 0 || m % n != 0 {
            return Err(Error::shape(
                "patch samples T_p",
                format!("N × {} dividing {m} tokens", self.group_size),
                format!("{n} × {s}"),
            ));
        }
        let t = g.repeat_rows(t_p, m / n);
        let t = self.wt.forward(g, store, t);
        let tokens = g.add(up, t);
        let q = self.q.forward(g, store, tokens);
        let k = self.k.forward(g, store, tokens);
        let v = self.v.forward(g, store, tokens);
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        let a = g.softmax_rows(logits);
        let weights = g.value(a).clone();
        let mixed = g.matmul(a, v);
        let delta = self.out.forward(g, store, mixed);
        let h = g.add(up, delta);
        if !g.value(h).is_finite() {
            return Err(Error::non_finite("attention fusion"));
        }
        Ok((h, weights))
    }
}

/// Output of [`RefineUpsample::forward`].
#[derive(Clone, Debug)]
pub struct UpsampleOut {
    /// Interpolated and regressed dense points.
    pub dense: Var,
    /// `dense` followed by every point of the partial input.
    pub union: Var,
    /// Farthest-point sample of `union`: `G_p^c`.
    pub coarse: Var,
}

/// Pointwise convolution `β` on `H_p`, inverse-distance 3-NN interpolation
/// of those features onto query points (the new points plus an FPS subset
/// of the partial input), a zero-initialized regression head for offsets,
/// union with the partial input, and FPS to the coarse size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineUpsample {
    beta: Mlp,
    hidden: Mlp,
    head: Linear,
    coarse_size: usize,
}

impl RefineUpsample {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, coarse_size: usize, rng: &mut impl Rng) -> Self {
        Self {
            beta: Mlp::new(store, &format!("{name}.beta"), &[dim, dim, dim], rng),
            hidden: Mlp::new(store, &format!("{name}.hidden"), &[dim, dim], rng),
            head: Linear::zeroed(store, &format!("{name}.head"), dim, 3),
            coarse_size,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        new_points: Var,
        x: Var,
    ) -> Result<UpsampleOut> {
        let feats = self.beta.forward_activated(g, store, h);
        let m = g.shape(new_points).0;
        let xs = matrix_points(g.value(x));
        let take = xs.len().min(m);
        let xq = fps_indices(&xs, take, farthest_from_centroid(&xs))?;
        let xq = g.gather(x, xq);
        let queries = g.concat_rows(&[new_points, xq]);

        let interp = idw_interpolate(g, new_points, feats, queries, 3);
        let hid = self.hidden.forward_activated(g, store, interp);
        let off = self.head.forward(g, store, hid);
        let dense = g.add(queries, off);
        let union = g.concat_rows(&[dense, x]);

        let upts = matrix_points(g.value(union));
        let idx = if upts.len() >= self.coarse_size {
            fps_indices(&upts, self.coarse_size, farthest_from_centroid(&upts))?
        } else {
            (0..self.coarse_size).map(|i| i % upts.len()).collect()
        };
        let coarse = g.gather(union, idx);
        if !g.value(coarse).is_finite() {
            return Err(Error::non_finite("refined coarse cloud"));
        }
        Ok(UpsampleOut {
            dense,
            union,
            coarse,
        })
    }
}

/// Full local refinement output.
#[derive(Clone, Debug)]
pub struct RefineOut {
    pub up: UpTransOut,
    pub h: Var,
    pub fuse_weights: Matrix,
    pub upsample: UpsampleOut,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalRefinement {
    cfg: RefineConfig,
    pub up_trans: UpTrans,
    pub fuse: AttentionFuse,
    pub upsample: RefineUpsample,
}

impl LocalRefinement {
    pub fn new(
        store: &mut ParamStore,
        cfg: RefineConfig,
        dim: usize,
        group_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            cfg,
            up_trans: UpTrans::new(store, "lr.up", dim, cfg.up_ratio, rng),
            fuse: AttentionFuse::new(store, "lr.fuse", dim, group_size, rng),
            upsample: RefineUpsample::new(store, "lr.ups", dim, cfg.coarse_size, rng),
        }
    }

    pub fn config(&self) -> &RefineConfig {
        &self.cfg
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: &PatchVars,
        t_p: Var,
        x: Var,
    ) -> Result<RefineOut> {
        let up = self.up_trans.forward(g, store, patches)?;
        let (h, fuse_weights) = self.fuse.forward(g, store, up.features, t_p)?;
        let upsample = self.upsample.forward(g, store, h, up.points, x)?;
        Ok(RefineOut {
            up,
            h,
            fuse_weights,
            upsample,
        })
    }
}
