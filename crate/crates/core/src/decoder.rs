//! Coarse-to-fine relational decoder.
//!
//! The coarse stage folds learned seed points conditioned on `Z` and a
//! pooled descriptor of `G_p^c`. The fine stage runs selective residual
//! blocks over the coarse points at several resolutions (FPS downsampling,
//! inverse-distance upsampling), then replicates every coarse point and adds
//! a zero-initialized offset per replica.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, Matrix, Mlp, ParamStore, Var};
use crate::cloud::nn::matrix_points;
use crate::cloud::sampling::{farthest_from_centroid, fps_indices};
use crate::error::{Error, Result};
use crate::pointops::{idw_interpolate, knn_mean};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub coarse_size: usize,
    pub fine_size: usize,
    /// Channel width per resolution of the fine stage; each further entry
    /// works on a 4× FPS-downsampled copy of the previous one.
    pub scales: Vec<usize>,
    /// Branches of every selective block (distinct neighborhood sizes).
    pub branches: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            coarse_size: 1024,
            fine_size: 2048,
            scales: vec![64, 128],
            branches: 3,
        }
    }
}

/// Resolutions with published ground truth.
pub const BENCHMARK_RESOLUTIONS: [usize; 4] = [2048, 4096, 8192, 16384];

/// Neighborhood sizes of the selective-block branches.
const BRANCH_NEIGHBORS: [usize; 4] = [1, 8, 16, 32];

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_size == 0 {
            return Err(Error::config("decoder.coarse_size", "must be positive"));
        }
        if self.fine_size < self.coarse_size {
            return Err(Error::config("decoder.fine_size", "must be at least coarse_size"));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::config("decoder.scales", "need at least one positive width"));
        }
        if !(2..=BRANCH_NEIGHBORS.len()).contains(&self.branches) {
            return Err(Error::config(
                "decoder.branches",
                format!("must be between 2 and {}", BRANCH_NEIGHBORS.len()),
            ));
        }
        Ok(())
    }

    /// Replicas per coarse point in the fine stage.
    pub fn replicas(&self) -> usize {
        self.fine_size.div_ceil(self.coarse_size)
    }
}

/// Residual block mixing pointwise branches over neighborhoods of
/// different sizes with per-point softmax gates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectiveBlock {
    branches: Vec<Linear>,
    gate: Linear,
}

impl SelectiveBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, branches: usize, rng: &mut impl Rng) -> Self {
        Self {
            branches: (0..branches)
                .map(|b| Linear::new(store, &format!("{name}.br{b}"), width, width, rng))
                .collect(),
            gate: Linear::new(store, &format!("{name}.gate"), width, branches, rng),
        }
    }

    /// Returns the block output and its `n × branches` gate values.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: Var, h: Var) -> (Var, Matrix) {
        let gates = self.gate.forward(g, store, h);
        let gates = g.softmax_rows(gates);
        let gate_values = g.value(gates).clone();
        let mut out = h;
        for (b, layer) in self.branches.iter().enumerate() {
            let agg = knn_mean(g, points, h, BRANCH_NEIGHBORS[b]);
            let br = layer.forward(g, store, agg);
            let br = g.silu(br);
            let gb = g.slice_cols(gates, b, 1);
            let br = g.mul_col(br, gb);
            out = g.add(out, br);
        }
        (out, gate_values)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct CoarseDecoder {
    seeds: String,
    pointnet: Mlp,
    fold: Mlp,
    size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Stage {
    down: Option<Linear>,
    block: SelectiveBlock,
    up: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct FineDecoder {
    embed: Linear,
    stages: Vec<Stage>,
    slots: String,
    hidden: Mlp,
    head: Linear,
}

/// Output of [`Decoder::decode_fine`].
#[derive(Clone, Debug)]
pub struct FineOut {
    pub points: Var,
    /// Gate values of every selective block, outermost resolution first.
    pub gates: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoder {
    cfg: DecoderConfig,
    coarse: CoarseDecoder,
    fine: FineDecoder,
}

const SLOT_DIM: usize = 8;
const POINTNET_DIM: usize = 64;

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, z_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.scales[0];
        let seeds = "dec.seeds".to_string();
        store.init_scaled(&seeds, cfg.coarse_size, 3, 0.5, rng);
        let coarse = CoarseDecoder {
            seeds,
            pointnet: Mlp::new(store, "dec.pn", &[3, POINTNET_DIM, POINTNET_DIM], rng),
            fold: Mlp::new(store, "dec.fold", &[3 + z_dim + POINTNET_DIM, w0, w0, 3], rng),
            size: cfg.coarse_size,
        };
        let mut stages = Vec::new();
        for (i, &w) in cfg.scales.iter().enumerate() {
            let (down, up) = if i == 0 {
                (None, None)
            } else {
                let prev = cfg.scales[i - 1];
                (
                    Some(Linear::new(store, &format!("dec.s{i}.down"), prev, w, rng)),
                    Some(Linear::new(store, &format!("dec.s{i}.up"), w, prev, rng)),
                )
            };
            let block = SelectiveBlock::new(store, &format!("dec.s{i}.sk"), w, cfg.branches, rng);
            stages.push(Stage { down, block, up });
        }
        let slots = "dec.slots".to_string();
        store.init_scaled(&slots, cfg.replicas(), SLOT_DIM, 1.0, rng);
        let fine = FineDecoder {
            embed: Linear::new(store, "dec.embed", 3 + z_dim, w0, rng),
            stages,
            slots,
            hidden: Mlp::new(store, "dec.hidden", &[w0 + SLOT_DIM, w0], rng),
            head: Linear::zeroed(store, "dec.head", w0, 3),
        };
        Ok(Self {
            cfg: cfg.clone(),
            coarse,
            fine,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// `z: 1 × z_dim`, `refined: n × 3` → `coarse_size × 3`.
    pub fn decode_coarse(&self, g: &mut Graph, store: &ParamStore, z: Var, refined: Var) -> Result<Var> {
        let c = &self.coarse;
        let n = g.shape(refined).0;
        let pf = c.pointnet.forward_activated(g, store, refined);
        let pf = g.group_max(pf, n);
        let pf = g.broadcast_rows(pf, c.size);
        let zb = g.broadcast_rows(z, c.size);
        let seeds = g.param(store, &c.seeds);
        let input = g.concat_cols(&[seeds, zb, pf]);
        let fold = c.fold.forward(g, store, input);
        let out = g.add(seeds, fold);
        if !g.value(out).is_finite() {
            return Err(Error::non_finite("coarse decoder output"));
        }
        Ok(out)
    }

    /// `coarse: m × 3`, `z: 1 × z_dim` → `fine_size × 3`. With a zero head
    /// the output is exactly the coarse cloud with point `i` replicated at
    /// rows `⌈i·f/m⌉ .. ⌈(i+1)·f/m⌉`.
    pub fn decode_fine(&self, g: &mut Graph, store: &ParamStore, coarse: Var, z: Var) -> Result<FineOut> {
        let f = &self.fine;
        let m = g.shape(coarse).0;
        let zb = g.broadcast_rows(z, m);
        let input = g.concat_cols(&[coarse, zb]);
        let h = f.embed.forward(g, store, input);
        let h = g.silu(h);

        let mut gates = Vec::new();
        let mut levels: Vec<(Var, Var)> = Vec::new();
        let (mut pts, mut feat) = (coarse, h);
        for stage in &f.stages {
            if let Some(down) = &stage.down {
                let ps = matrix_points(g.value(pts));
                let k = (ps.len() / 4).max(1);
                let idx = fps_indices(&ps, k, farthest_from_centroid(&ps))?;
                pts = g.gather(pts, idx.clone());
                let fd = g.gather(feat, idx);
                let fd = down.forward(g, store, fd);
                feat = g.silu(fd);
            }
            let (out, gv) = stage.block.forward(g, store, pts, feat);
            gates.push(gv);
            feat = out;
            levels.push((pts, feat));
        }
        for i in (1..f.stages.len()).rev() {
            let (src, sf) = levels[i];
            let (dst, df) = levels[i - 1];
            let up = idw_interpolate(g, src, sf, dst, 3);
            let up = f.stages[i].up.as_ref().expect("upper stages project back").forward(g, store, up);
            let merged = g.add(df, up);
            levels[i - 1] = (dst, merged);
        }
        let feat = levels[0].1;

        let (src, slot) = replica_layout(m, self.cfg.fine_size);
        let base = g.gather(coarse, src.clone());
        let hf = g.gather(feat, src);
        let slots = g.param(store, &f.slots);
        let se = g.gather(slots, slot);
        let input = g.concat_cols(&[hf, se]);
        let hid = f.hidden.forward_activated(g, store, input);
        let off = f.head.forward(g, store, hid);
        let points = g.add(base, off);
        if !g.value(points).is_finite() {
            return Err(Error::non_finite("fine decoder output"));
        }
        Ok(FineOut { points, gates })
    }
}

/// Source coarse index and replica slot for each of `f` fine rows.
pub fn replica_layout(m: usize, f: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(f);
    let mut slot = Vec::with_capacity(f);
    let mut last = usize::MAX;
    let mut count = 0;
    for j in 0..f {
        let s = j * m / f;
        if s != last {
            last = s;
            count = 0;
        }
        src.push(s);
        slot.push(count);
        count += 1;
    }
    (src, slot)
}
