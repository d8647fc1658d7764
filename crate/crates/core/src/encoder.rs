//! Shared set-abstraction encoder with neighborhood attention.
//!
//! Grouped tensors are stored flattened: a patch tensor of shape
//! `N_p × S_p × D_p` is an `(N_p·S_p) × D_p` matrix whose rows for patch `i`
//! are `i·S_p .. (i+1)·S_p`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, Matrix, Mlp, ParamStore, Var};
use crate::cloud::nn::{knn_all, matrix_points, NnBackend};
use crate::cloud::sampling::{farthest_from_centroid, fps_indices, knn_group_points};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::latent::{GaussianHead, GaussianLatent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub n_points: usize,
    pub group_size: usize,
    pub feature_dim: usize,
}

impl LevelConfig {
    pub const fn new(n_points: usize, group_size: usize, feature_dim: usize) -> Self {
        Self {
            n_points,
            group_size,
            feature_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub levels: Vec<LevelConfig>,
    pub attention_heads: usize,
    /// Patch centers attended to by each patch, itself included.
    pub attention_neighbors: usize,
    /// Dimension of the Gaussian code `z_g`.
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: vec![LevelConfig::new(256, 16, 64), LevelConfig::new(64, 16, 128)],
            attention_heads: 4,
            attention_neighbors: 16,
            latent_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("encoder.levels", "at least one level is required"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.n_points == 0 || l.group_size == 0 || l.feature_dim == 0 {
                return Err(Error::config(
                    "encoder.levels",
                    format!("level {i} has a zero dimension"),
                ));
            }
            if l.feature_dim % self.attention_heads.max(1) != 0 {
                return Err(Error::config(
                    "encoder.attention_heads",
                    format!("feature_dim {} of level {i} is not divisible by the head count", l.feature_dim),
                ));
            }
            if i > 0 {
                let prev = self.levels[i - 1];
                if l.n_points >= prev.n_points {
                    return Err(Error::config(
                        "encoder.levels",
                        "n_points must strictly decrease across levels",
                    ));
                }
                if l.group_size > prev.n_points {
                    return Err(Error::config(
                        "encoder.levels",
                        format!("group_size of level {i} exceeds the points of level {}", i - 1),
                    ));
                }
            }
        }
        if self.attention_heads == 0 {
            return Err(Error::config("encoder.attention_heads", "must be positive"));
        }
        if self.attention_neighbors == 0 {
            return Err(Error::config("encoder.attention_neighbors", "must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("encoder.latent_dim", "must be positive"));
        }
        Ok(())
    }

    pub fn min_input_points(&self) -> usize {
        self.levels[0].n_points.max(self.levels[0].group_size)
    }

    /// Width of the pooled global feature (`mean ‖ max` of the last level).
    pub fn global_dim(&self) -> usize {
        2 * self.levels.last().map_or(0, |l| l.feature_dim)
    }
}

/// Patch output of one abstraction level, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub level: usize,
    /// `N_p × 3` patch centers.
    pub centers: Matrix,
    /// `(N_p·S_p) × D_p` member features.
    pub features: Matrix,
    /// `N_p × D_p` max-pooled patch features.
    pub pooled: Matrix,
    pub group_size: usize,
}

impl PatchFeatures {
    pub fn num_patches(&self) -> usize {
        self.centers.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Feature row of member `j` in patch `i`.
    pub fn feature(&self, i: usize, j: usize) -> &[f64] {
        self.features.row(i * self.group_size + j)
    }

    /// Patch coordinates laid out as `N_p × 3 × D_p` (flattened to
    /// `(N_p·3) × D_p`): each center coordinate tiled across the feature
    /// channels.
    pub fn coords_tiled(&self) -> Matrix {
        let (n, d) = (self.num_patches(), self.feature_dim());
        let mut out = Matrix::zeros(n * 3, d);
        for i in 0..n {
            for k in 0..3 {
                out.row_mut(i * 3 + k).fill(self.centers.get(i, k));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.centers.is_finite() && self.features.is_finite() && self.pooled.is_finite()
    }
}

/// Patch output of one level as graph nodes.
#[derive(Clone, Debug)]
pub struct PatchVars {
    pub level: usize,
    pub centers: Var,
    /// `(N_p·S_p) × 3` member offsets from their patch center.
    pub rel: Var,
    pub features: Var,
    pub pooled: Var,
    pub n_patches: usize,
    pub group_size: usize,
}

impl PatchVars {
    pub fn values(&self, g: &Graph) -> PatchFeatures {
        PatchFeatures {
            level: self.level,
            centers: g.value(self.centers).clone(),
            features: g.value(self.features).clone(),
            pooled: g.value(self.pooled).clone(),
            group_size: self.group_size,
        }
    }
}

/// Attention weights of one [`AttentionLayer`] application.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// `(N_p·k) × heads`; rows `i·k .. (i+1)·k` hold patch `i`'s weights.
    pub weights: Matrix,
    /// Flattened `N_p × k` neighbor indices; each row starts with the patch
    /// itself.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

impl AttentionTrace {
    /// Sum of weights per (query patch, head): `N_p × heads`.
    pub fn row_sums(&self) -> Matrix {
        let (rows, h) = self.weights.shape();
        let n = rows / self.k;
        let mut out = Matrix::zeros(n, h);
        for r in 0..rows {
            for c in 0..h {
                let v = out.get(r / self.k, c) + self.weights.get(r, c);
                out.set(r / self.k, c, v);
            }
        }
        out
    }
}

/// Multi-head attention from each patch to its nearest patch centers, with
/// a learned encoding of relative center positions added to keys and values.
/// The output projection starts at zero, so the layer is the identity at
/// initialization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    pos: Mlp,
    out: Linear,
    heads: usize,
    neighbors: usize,
    dim: usize,
}

impl AttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        neighbors: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            q: Linear::no_bias(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::no_bias(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::no_bias(store, &format!("{name}.v"), dim, dim, rng),
            pos: Mlp::new(store, &format!("{name}.pos"), &[3, dim, dim], rng),
            out: Linear::zeroed(store, &format!("{name}.out"), dim, dim),
            heads,
            neighbors,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pv: &PatchVars) -> (PatchVars, AttentionTrace) {
        let n = pv.n_patches;
        let k = self.neighbors.min(n);
        let dh = self.dim / self.heads;
        let pts = matrix_points(g.value(pv.centers));
        let neighbors: Vec<usize> = knn_all(&pts, &pts, k, NnBackend::Auto)
            .into_iter()
            .flat_map(|row| row.into_iter().map(|(i, _)| i))
            .collect();

        let ci = g.repeat_rows(pv.centers, k);
        let cj = g.gather(pv.centers, neighbors.clone());
        let rel = g.sub(ci, cj);
        let pos = self.pos.forward(g, store, rel);

        let q = self.q.forward(g, store, pv.pooled);
        let q = g.repeat_rows(q, k);
        let key = self.k.forward(g, store, pv.pooled);
        let key = g.gather(key, neighbors.clone());
        let key = g.add(key, pos);
        let val = self.v.forward(g, store, pv.pooled);
        let val = g.gather(val, neighbors.clone());
        let val = g.add(val, pos);

        let logits = g.mul(q, key);
        let logits = g.sum_col_blocks(logits, dh);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let attn = g.group_softmax(logits, k);
        let weights = g.value(attn).clone();
        let attn = g.repeat_col_blocks(attn, dh);
        let agg = g.mul(attn, val);
        let agg = g.group_sum(agg, k);
        let delta = self.out.forward(g, store, agg);

        let pooled = g.add(pv.pooled, delta);
        let spread = g.repeat_rows(delta, pv.group_size);
        let features = g.add(pv.features, spread);
        (
            PatchVars {
                pooled,
                features,
                ..pv.clone()
            },
            AttentionTrace {
                weights,
                neighbors,
                k,
            },
        )
    }
}

/// Sample centers by FPS, group their nearest points, and run a shared
/// pointwise MLP over relative coordinates (plus incoming features) followed
/// by a max-pool over each group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct SetAbstraction {
    cfg: LevelConfig,
    mlp: Mlp,
}

impl SetAbstraction {
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        points: Var,
        feats: Option<Var>,
    ) -> Result<PatchVars> {
        let pts = matrix_points(g.value(points));
        if pts.len() < self.cfg.n_points || pts.len() < self.cfg.group_size {
            return Err(Error::domain(format!(
                "encoder level {level} needs at least {} points, got {}",
                self.cfg.n_points.max(self.cfg.group_size),
                pts.len()
            )));
        }
        let idx = fps_indices(&pts, self.cfg.n_points, farthest_from_centroid(&pts))?;
        let center_pts: Vec<_> = idx.iter().map(|&i| pts[i]).collect();
        let groups = knn_group_points(&pts, &center_pts, self.cfg.group_size)?;
        let s = self.cfg.group_size;

        let centers = g.gather(points, idx);
        let members = g.gather(points, groups.indices.clone());
        let cexp = g.repeat_rows(centers, s);
        let rel = g.sub(members, cexp);
        let input = match feats {
            Some(f) => {
                let f = g.gather(f, groups.indices);
                g.concat_cols(&[rel, f])
            }
            None => rel,
        };
        let features = self.mlp.forward_activated(g, store, input);
        let pooled = g.group_max(features, s);
        Ok(PatchVars {
            level,
            centers,
            rel,
            features,
            pooled,
            n_patches: self.cfg.n_points,
            group_size: s,
        })
    }
}

/// Graph outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub levels: Vec<PatchVars>,
    pub traces: Vec<AttentionTrace>,
    /// `1 × global_dim` pooled descriptor of the whole cloud.
    pub global: Var,
}

/// The shared encoder. One instance, one parameter set, applied to every
/// cloud that is encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    cfg: EncoderConfig,
    levels: Vec<SetAbstraction>,
    attention: Vec<AttentionLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut levels = Vec::new();
        let mut attention = Vec::new();
        let mut in_dim = 0;
        for (i, l) in cfg.levels.iter().enumerate() {
            let mlp = Mlp::new(
                store,
                &format!("enc.sa{i}"),
                &[3 + in_dim, l.feature_dim, l.feature_dim],
                rng,
            );
            levels.push(SetAbstraction { cfg: *l, mlp });
            attention.push(AttentionLayer::new(
                store,
                &format!("enc.att{i}"),
                l.feature_dim,
                cfg.attention_heads,
                cfg.attention_neighbors,
                rng,
            ));
            in_dim = l.feature_dim;
        }
        Ok(Self {
            cfg: cfg.clone(),
            levels,
            attention,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn global_dim(&self) -> usize {
        self.cfg.global_dim()
    }

    /// Encode an `n×3` point node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: Var) -> Result<EncodedVars> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut traces = Vec::with_capacity(self.levels.len());
        let (mut pts, mut feats) = (points, None);
        for (i, (sa, att)) in self.levels.iter().zip(&self.attention).enumerate() {
            let pv = sa.forward(g, store, i, pts, feats)?;
            let (pv, trace) = att.forward(g, store, &pv);
            if !g.value(pv.features).is_finite() || !g.value(pv.pooled).is_finite() {
                return Err(Error::non_finite(format!("encoder level {i}")));
            }
            pts = pv.centers;
            feats = Some(pv.pooled);
            out.push(pv);
            traces.push(trace);
        }
        let last = out.last().expect("at least one level").clone();
        let mean = g.mean_rows(last.pooled);
        let max = g.group_max(last.pooled, last.n_patches);
        let global = g.concat_cols(&[mean, max]);
        Ok(EncodedVars {
            levels: out,
            traces,
            global,
        })
    }
}

/// Encoder output as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub levels: Vec<PatchFeatures>,
    pub global: Vec<f64>,
    pub z_g: GaussianLatent,
}

/// Encode a cloud and read its Gaussian code through `head`.
pub fn encode(
    cloud: &PointCloud,
    encoder: &Encoder,
    head: &GaussianHead,
    store: &ParamStore,
) -> Result<EncoderOutput> {
    if cloud.len() < encoder.cfg.min_input_points() {
        return Err(Error::domain(format!(
            "cloud has {} points but the first encoder level needs {}",
            cloud.len(),
            encoder.cfg.min_input_points()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(cloud.to_matrix());
    let enc = encoder.forward(&mut g, store, x)?;
    let gv = head.forward(&mut g, store, enc.global);
    Ok(EncoderOutput {
        levels: enc.levels.iter().map(|l| l.values(&g)).collect(),
        global: g.value(enc.global).data().to_vec(),
        z_g: gv.values(&g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_difference, relative_error};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere(n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
        crate::datasets::synth::sample_surface(crate::datasets::ShapeKind::Sphere, n, rng)
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            levels: vec![LevelConfig::new(32, 8, 16), LevelConfig::new(8, 4, 16)],
            attention_heads: 2,
            attention_neighbors: 4,
            latent_dim: 8,
        }
    }

    fn setup(cfg: &EncoderConfig) -> (ParamStore, Encoder, GaussianHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        let head = GaussianHead::new(&mut store, "lat.p", cfg.global_dim(), cfg.latent_dim, &mut rng);
        (store, enc, head)
    }

    #[test]
    fn level_shapes_follow_config() {
        let cfg = EncoderConfig {
            levels: vec![LevelConfig::new(256, 16, 64), LevelConfig::new(64, 16, 128)],
            ..EncoderConfig::default()
        };
        let (store, enc, head) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = encode(&sphere(2048, &mut rng), &enc, &head, &store).unwrap();
        assert_eq!(out.levels[0].num_patches(), 256);
        assert_eq!(out.levels[1].num_patches(), 64);
        assert_eq!(out.levels[0].features.shape(), (256 * 16, 64));
        assert_eq!(out.levels[1].coords_tiled().shape(), (64 * 3, 128));
        assert_eq!(out.z_g.dim(), cfg.latent_dim);
    }

    #[test]
    fn too_small_cloud_is_rejected() {
        let (store, enc, head) = setup(&tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            encode(&sphere(16, &mut rng), &enc, &head, &store),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn code_is_invariant_to_point_order() {
        let (store, enc, head) = setup(&tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = sphere(128, &mut rng);
        let mut idx: Vec<usize> = (0..cloud.len()).collect();
        idx.shuffle(&mut rng);
        let a = encode(&cloud, &enc, &head, &store).unwrap().z_g;
        let b = encode(&cloud.select(&idx), &enc, &head, &store).unwrap().z_g;
        for (x, y) in a.mean().iter().zip(b.mean()).chain(a.log_var().iter().zip(b.log_var())) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn code_mean_gradient_matches_finite_difference() {
        let cfg = tiny();
        let (store, enc, head) = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = sphere(128, &mut rng);
        let f = |s: &ParamStore| encode(&cloud, &enc, &head, s).unwrap().z_g.mean().iter().sum::<f64>();
        let mut g = Graph::new();
        let x = g.constant(cloud.to_matrix());
        let e = enc.forward(&mut g, &store, x).unwrap();
        let gv = head.forward(&mut g, &store, e.global);
        let loss = g.sum_all(gv.mean);
        let grads = g.backward(loss).param_grads(&store);
        for (name, entry) in [("enc.sa0.0.w", 5), ("enc.sa1.1.w", 17), ("enc.att1.pos.0.w", 3)] {
            let numeric = central_difference(
                |v| {
                    let mut s = store.clone();
                    s.get_mut(name).unwrap().data_mut()[entry] = v;
                    f(&s)
                },
                store.get(name).unwrap().data()[entry],
                1e-3,
            );
            let analytic = grads[name].data()[entry];
            assert!(
                relative_error(analytic, numeric, 1e-8) < 1e-4,
                "{name}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    #[test]
    fn attention_is_identity_at_init_and_weights_normalize() {
        let (store, enc, _) = setup(&tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = sphere(128, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(cloud.to_matrix());
        let sa = enc.levels[0].forward(&mut g, &store, 0, x, None).unwrap();
        let (att, trace) = enc.attention[0].forward(&mut g, &store, &sa);
        assert_eq!(g.value(att.pooled), g.value(sa.pooled));
        assert_eq!(g.value(att.features), g.value(sa.features));
        for s in trace.row_sums().data() {
            assert!((s - 1.0).abs() < 1e-6);
        }
        for i in 0..sa.n_patches {
            assert_eq!(trace.neighbors[i * trace.k], i);
        }
    }

    #[test]
    fn trained_attention_changes_output_and_still_normalizes() {
        let (mut store, enc, _) = setup(&tiny());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (_, m) in store.iter_mut().filter(|(n, _)| n.starts_with("enc.att0.out")) {
            m.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let cloud = sphere(128, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(cloud.to_matrix());
        let sa = enc.levels[0].forward(&mut g, &store, 0, x, None).unwrap();
        let (att, trace) = enc.attention[0].forward(&mut g, &store, &sa);
        assert_ne!(g.value(att.pooled), g.value(sa.pooled));
        for s in trace.row_sums().data() {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_patch_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "enc.t", 4, 2, 8, &mut rng);
        let mut g = Graph::new();
        let centers = g.constant(Matrix::from_rows(&[[0.1, 0.2, 0.3]]));
        let feats = g.constant(Matrix::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.1).collect()));
        let pooled = g.group_max(feats, 2);
        let rel = g.constant(Matrix::zeros(2, 3));
        let pv = PatchVars {
            level: 0,
            centers,
            rel,
            features: feats,
            pooled,
            n_patches: 1,
            group_size: 2,
        };
        let (_, trace) = layer.forward(&mut g, &store, &pv);
        assert_eq!(trace.k, 1);
        assert!(trace.weights.data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny();
        cfg.levels[1].n_points = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        let mut cfg = tiny();
        cfg.attention_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.levels.clear();
        assert!(cfg.validate().is_err());
    }
}
