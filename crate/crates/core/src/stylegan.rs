//! Style-modulated point generator, discriminator and adversarial updates.
//!
//! The generator maps `(w, Z)` to a style vector and grows a learned
//! constant point set by repeated ×2 upsampling. All point layers are 1×1
//! (per-point) and every upsample is followed by a fixed k-NN averaging
//! filter. Outputs are produced in the centred frame and shifted by the
//! latent anchor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::optim::{clip_global_norm, sum_grads, Adam};
use crate::autodiff::{Graph, Linear, Matrix, Mlp, ParamStore, Var};
use crate::cloud::nn::{knn_all, NnBackend};
use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::latent::LatentZ;
use crate::pointops::knn_indices;

/// Neighbors averaged by the low-pass filter after each upsample.
pub const SMOOTHING_NEIGHBORS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub fine_size: usize,
    /// Number of ×2 upsampling stages.
    pub stages: usize,
    pub channels: usize,
    pub style_dim: usize,
    /// Length of the style noise `w`.
    pub noise_dim: usize,
    pub disc_widths: Vec<usize>,
    /// Weight `w_g` of the real cloud in the training blend.
    pub blend_weight: f64,
    /// Weight of the Chamfer term tying `Generator(Z_Y)` to `Y`.
    pub recon_weight: f64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            fine_size: 2048,
            stages: 3,
            channels: 64,
            style_dim: 64,
            noise_dim: 32,
            disc_widths: vec![64, 128],
            blend_weight: 0.5,
            recon_weight: 1.0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fine_size < (1 << self.stages) {
            return Err(Error::config("gan.stages", "2^stages must not exceed fine_size"));
        }
        if self.channels == 0 || self.style_dim == 0 || self.noise_dim == 0 {
            return Err(Error::config("gan.channels", "widths must be positive"));
        }
        if self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return Err(Error::config("gan.disc_widths", "need at least one positive width"));
        }
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return Err(Error::config("gan.blend_weight", "must lie in [0, 1]"));
        }
        if !(self.recon_weight >= 0.0) {
            return Err(Error::config("gan.recon_weight", "must be non-negative"));
        }
        Ok(())
    }

    fn base_points(&self) -> usize {
        self.fine_size.div_ceil(1 << self.stages)
    }
}

/// Input noise `w` of the style mapping, drawn from a seed that also drives
/// the per-point noise injections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleNoise {
    pub w: Vec<f64>,
    pub seed: u64,
}

impl StyleNoise {
    pub fn sample(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { w, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("style noise"));
        }
        Ok(())
    }
}

/// Fixed, normalized averaging kernel over each point's k nearest neighbors
/// (the point itself included).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowPass {
    pub weights: Vec<f64>,
}

impl LowPass {
    pub fn new(k: usize) -> Self {
        Self {
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn apply(&self, g: &mut Graph, coords: Var, x: Var) -> Var {
        let n = g.shape(x).0;
        let k = self.k().min(n);
        let nbr = knn_indices(g, coords, coords, k);
        let w: Vec<f64> = if k == self.k() {
            self.weights.clone()
        } else {
            vec![1.0 / k as f64; k]
        };
        let col = Matrix::from_vec(n * k, 1, (0..n * k).map(|i| w[i % k]).collect());
        let col = g.constant(col);
        let xe = g.gather(x, nbr);
        let xe = g.mul_col(xe, col);
        g.group_sum(xe, k)
    }
}

/// Per-point layer `silu((x ⊙ (1 + A·style))·W + b + noise·strength)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointConv {
    modulation: Linear,
    conv: Linear,
    strength: String,
    /// Spatial support of the convolution, always 1.
    pub support: usize,
}

impl PointConv {
    fn new(store: &mut ParamStore, name: &str, style_dim: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let strength = format!("{name}.noise");
        store.init_zeros(&strength, 1, c_out);
        Self {
            modulation: Linear::zeroed(store, &format!("{name}.mod"), style_dim, c_in),
            conv: Linear::new(store, &format!("{name}.conv"), c_in, c_out, rng),
            strength,
            support: 1,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, style: Var, noise: &mut ChaCha8Rng) -> Var {
        let n = g.shape(x).0;
        let s = self.modulation.forward(g, store, style);
        let s = g.add_scalar(s, 1.0);
        let xm = g.mul_row(x, s);
        let y = self.conv.forward(g, store, xm);
        let eps = Matrix::from_vec(n, 1, (0..n).map(|_| StandardNormal.sample(noise)).collect());
        let eps = g.constant(eps);
        let strength = g.param(store, &self.strength);
        let inj = g.matmul(eps, strength);
        let y = g.add(y, inj);
        g.silu(y)
    }
}

/// Coordinates of one upsampling stage before and after the low-pass filter.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub before: Matrix,
    pub after: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    mapping: Mlp,
    constant: String,
    convs: Vec<PointConv>,
    slots: Vec<String>,
    lowpass: LowPass,
    to_xyz: Linear,
    base: usize,
    fine: usize,
}

impl Generator {
    fn new(store: &mut ParamStore, cfg: &GanConfig, z_dim: usize, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let mapping = Mlp::new(store, "gen.map", &[cfg.noise_dim + z_dim, cfg.style_dim, cfg.style_dim], rng);
        let constant = "gen.const".to_string();
        store.init_scaled(&constant, cfg.base_points(), c, 1.0, rng);
        let convs = (0..=cfg.stages)
            .map(|i| PointConv::new(store, &format!("gen.l{i}"), cfg.style_dim, c, c, rng))
            .collect();
        let slots = (1..=cfg.stages)
            .map(|i| {
                let name = format!("gen.up{i}");
                store.init_scaled(&name, 2, c, 0.5, rng);
                name
            })
            .collect();
        Self {
            mapping,
            constant,
            convs,
            slots,
            lowpass: LowPass::new(SMOOTHING_NEIGHBORS),
            to_xyz: Linear::new(store, "gen.xyz", c, 3, rng),
            base: cfg.base_points(),
            fine: cfg.fine_size,
        }
    }

    /// Spatial support of every point layer.
    pub fn layer_supports(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.support).collect()
    }

    pub fn lowpass(&self) -> &LowPass {
        &self.lowpass
    }

    /// Centred-frame output `fine_size × 3` for `z: 1 × z_dim`,
    /// `w: 1 × noise_dim`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, w: Var, seed: u64) -> Result<(Var, Vec<StageTrace>)> {
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(1);
        let input = g.concat_cols(&[w, z]);
        let style = self.mapping.forward_activated(g, store, input);
        let mut x = g.param(store, &self.constant);
        x = self.convs[0].forward(g, store, x, style, &mut noise);
        let mut traces = Vec::new();
        for (conv, slot) in self.convs[1..].iter().zip(&self.slots) {
            let n = g.shape(x).0;
            let up = g.repeat_rows(x, 2);
            let slot = g.param(store, slot);
            let slot = g.gather(slot, (0..2 * n).map(|i| i % 2).collect());
            x = g.add(up, slot);
            let provisional = self.to_xyz.forward(g, store, x);
            let coords = g.constant(g.value(provisional).clone());
            x = self.lowpass.apply(g, coords, x);
            let smoothed = self.to_xyz.forward(g, store, x);
            traces.push(StageTrace {
                before: g.value(coords).clone(),
                after: g.value(smoothed).clone(),
            });
            x = conv.forward(g, store, x, style, &mut noise);
        }
        let mut out = self.to_xyz.forward(g, store, x);
        if g.shape(out).0 != self.fine {
            out = g.gather(out, (0..self.fine).collect());
        }
        if !g.value(out).is_finite() {
            return Err(Error::non_finite("generator output"));
        }
        Ok((out, traces))
    }

    pub fn base_points(&self) -> usize {
        self.base
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discriminator {
    mlp: Mlp,
    head: Linear,
}

impl Discriminator {
    fn new(store: &mut ParamStore, widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut w = vec![3];
        w.extend_from_slice(widths);
        Self {
            mlp: Mlp::new(store, "disc.mlp", &w, rng),
            head: Linear::new(store, "disc.head", *widths.last().expect("validated"), 1, rng),
        }
    }

    /// Raw score (before the sigmoid) of an `n × 3` cloud. The cloud is
    /// centred first, so the score ignores translation.
    pub fn logit(&self, g: &mut Graph, store: &ParamStore, points: Var) -> Var {
        let n = g.shape(points).0;
        let mean = g.mean_rows(points);
        let mean = g.broadcast_rows(mean, n);
        let centred = g.sub(points, mean);
        let f = self.mlp.forward_activated(g, store, centred);
        let f = g.group_max(f, n);
        self.head.forward(g, store, f)
    }
}

/// Generator and discriminator of the adversarial path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgStyleGan {
    cfg: GanConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

impl DgStyleGan {
    pub fn new(store: &mut ParamStore, cfg: &GanConfig, z_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            generator: Generator::new(store, cfg, z_dim, rng),
            discriminator: Discriminator::new(store, &cfg.disc_widths, rng),
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    /// Graph output in the world frame: generator output plus `anchor`.
    pub fn generate_var(&self, g: &mut Graph, store: &ParamStore, z: Var, anchor: Point, noise: &StyleNoise) -> Result<Var> {
        noise.validate()?;
        if noise.w.len() != self.cfg.noise_dim {
            return Err(Error::shape("style noise", self.cfg.noise_dim, noise.w.len()));
        }
        let w = g.constant(Matrix::row_vector(noise.w.clone()));
        let (out, _) = self.generator.forward(g, store, z, w, noise.seed)?;
        let n = g.shape(out).0;
        let a = g.constant(Matrix::row_vector(anchor.to_vec()));
        let a = g.broadcast_rows(a, n);
        Ok(g.add(out, a))
    }
}

/// `Y_g = Generator(Z)`. Without a latent the generator is driven by `w`
/// alone (zero code, anchor at the origin).
pub fn generate(z: Option<&LatentZ>, noise: &StyleNoise, gan: &DgStyleGan, store: &ParamStore, z_dim: usize) -> Result<PointCloud> {
    let mut g = Graph::new();
    let (zv, anchor) = match z {
        Some(l) => {
            if l.z.len() != z_dim {
                return Err(Error::shape("latent Z", z_dim, l.z.len()));
            }
            (Matrix::row_vector(l.z.clone()), l.anchor)
        }
        None => (Matrix::zeros(1, z_dim), [0.0; 3]),
    };
    let zv = g.constant(zv);
    let out = gan.generate_var(&mut g, store, zv, anchor, noise)?;
    PointCloud::from_matrix(g.value(out))
}

/// Probability in `(0, 1)` that `cloud` is real.
pub fn discriminate(cloud: &PointCloud, gan: &DgStyleGan, store: &ParamStore) -> f64 {
    let mut g = Graph::new();
    let p = g.constant(cloud.to_matrix());
    let l = gan.discriminator.logit(&mut g, store, p);
    crate::autodiff::sigmoid(g.value(l).item())
}

/// Greedy one-to-one nearest-neighbor matching: entry `j` is the real index
/// assigned to fake point `j`. Closest pairs are fixed first.
pub fn match_fake_to_real(real: &[Point], fake: &[Point]) -> Result<Vec<usize>> {
    if real.len() != fake.len() {
        return Err(Error::domain(format!(
            "blend needs equal sizes, got {} real and {} fake points",
            real.len(),
            fake.len()
        )));
    }
    let n = real.len();
    let mut assign = vec![usize::MAX; n];
    let mut taken = vec![false; n];
    let mut open: Vec<usize> = (0..n).collect();
    while !open.is_empty() {
        let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        let pts: Vec<Point> = free.iter().map(|&i| real[i]).collect();
        let qs: Vec<Point> = open.iter().map(|&j| fake[j]).collect();
        let k = free.len().min(16);
        let mut cands: Vec<(f64, usize, usize)> = knn_all(&pts, &qs, k, NnBackend::Auto)
            .into_iter()
            .zip(&open)
            .flat_map(|(row, &j)| row.into_iter().map(move |(i, d)| (d, j, i)))
            .collect();
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, j, li) in cands {
            let i = free[li];
            if assign[j] == usize::MAX && !taken[i] {
                assign[j] = i;
                taken[i] = true;
            }
        }
        open.retain(|&j| assign[j] == usize::MAX);
    }
    Ok(assign)
}

/// Training-time blend `w_g·Real + (1 − w_g)·Fake` after matching each fake
/// point to a distinct real point. Rows follow the fake cloud's order.
pub fn blend_train(real: &PointCloud, fake: &PointCloud, w_g: f64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&w_g) {
        return Err(Error::domain(format!("blend weight must lie in [0, 1], got {w_g}")));
    }
    let m = match_fake_to_real(real.points(), fake.points())?;
    let pts = fake
        .points()
        .iter()
        .zip(&m)
        .map(|(f, &i)| {
            let r = real.points()[i];
            [0, 1, 2].map(|k| w_g * r[k] + (1.0 - w_g) * f[k])
        })
        .collect();
    PointCloud::new(pts)
}

/// One generated cloud of a [`GanExample`].
#[derive(Clone, Debug)]
pub struct GanCondition {
    pub z: Matrix,
    pub anchor: Point,
    pub noise: StyleNoise,
    /// Cloud the output is pulled towards by the reconstruction term.
    pub target: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct GanExample {
    pub real: Matrix,
    pub fakes: Vec<GanCondition>,
}

/// Separate Adam states for generator (`gen.*`) and discriminator (`disc.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct GanOptim {
    pub gen: Adam,
    pub disc: Adam,
}

impl GanOptim {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            gen: Adam::new(beta1, beta2),
            disc: Adam::new(beta1, beta2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub g_loss: f64,
    pub d_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanRates {
    pub gen: f64,
    pub disc: f64,
    pub clip: f64,
}

fn keep_prefix(grads: BTreeMap<String, Matrix>, prefix: &str) -> BTreeMap<String, Matrix> {
    grads.into_iter().filter(|(k, _)| k.starts_with(prefix)).collect()
}

fn finish(mut grads: BTreeMap<String, Matrix>, n: usize, clip: f64) -> Result<BTreeMap<String, Matrix>> {
    for v in grads.values_mut() {
        v.scale_in_place(1.0 / n as f64);
    }
    let norm = clip_global_norm(&mut grads, clip);
    if !norm.is_finite() {
        return Err(Error::non_finite("adversarial gradients"));
    }
    Ok(grads)
}

/// Discriminator loss of a single real/fake set and its gradients with
/// respect to every parameter in `store`.
fn disc_loss(gan: &DgStyleGan, store: &ParamStore, reals: &[&Matrix], fakes: &[&Matrix]) -> (f64, BTreeMap<String, Matrix>) {
    let mut g = Graph::new();
    let mut terms = Vec::new();
    for (set, sign) in [(reals, -1.0), (fakes, 1.0)] {
        if set.is_empty() {
            continue;
        }
        let mut acc = Vec::new();
        for m in set.iter() {
            let p = g.constant((*m).clone());
            let l = gan.discriminator.logit(&mut g, store, p);
            let l = g.scale(l, sign);
            acc.push(g.softplus(l));
        }
        let s = g.concat_rows(&acc);
        terms.push(g.mean_all(s));
    }
    let loss = terms.into_iter().reduce(|a, b| g.add(a, b)).expect("at least one cloud");
    let grads = g.backward(loss).param_grads(store);
    (g.value(loss).item(), grads)
}

/// Discriminator-only update on detached clouds. Returns the mean loss
/// before the update.
pub fn discriminator_step(
    store: &mut ParamStore,
    gan: &DgStyleGan,
    opt: &mut GanOptim,
    pairs: &[(Matrix, Vec<Matrix>)],
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let parts: Vec<(f64, BTreeMap<String, Matrix>)> = pairs
        .par_iter()
        .map(|(real, fakes)| disc_loss(gan, store, &[real], &fakes.iter().collect::<Vec<_>>()))
        .collect();
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let grads = sum_grads(parts.into_iter().map(|p| keep_prefix(p.1, "disc.")).collect());
    let grads = finish(grads, pairs.len(), clip)?;
    opt.disc.step(store, &grads, lr);
    Ok(loss)
}

/// Generator loss for one example and its gradients with respect to every
/// parameter in `store`. Latents enter as constants, so nothing flows back
/// into the variational path.
fn gen_loss(gan: &DgStyleGan, store: &ParamStore, ex: &GanExample) -> Result<(f64, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new();
    let mut adv = Vec::new();
    let mut rec = Vec::new();
    for c in &ex.fakes {
        let z = g.constant(c.z.clone());
        let fake = gan.generate_var(&mut g, store, z, c.anchor, &c.noise)?;
        let l = gan.discriminator.logit(&mut g, store, fake);
        let l = g.scale(l, -1.0);
        adv.push(g.softplus(l));
        if let Some(t) = &c.target {
            let t = g.constant(t.clone());
            rec.push(g.chamfer(fake, t));
        }
    }
    let s = g.concat_rows(&adv);
    let mut loss = g.mean_all(s);
    if !rec.is_empty() && gan.cfg.recon_weight > 0.0 {
        let r = g.concat_rows(&rec);
        let r = g.mean_all(r);
        let r = g.scale(r, gan.cfg.recon_weight);
        loss = g.add(loss, r);
    }
    let grads = g.backward(loss).param_grads(store);
    Ok((g.value(loss).item(), grads))
}

/// Unfiltered gradients of the discriminator and generator losses for one
/// example, keyed by every parameter name in `store`.
pub fn adversarial_gradients(
    gan: &DgStyleGan,
    store: &ParamStore,
    ex: &GanExample,
) -> Result<(BTreeMap<String, Matrix>, BTreeMap<String, Matrix>)> {
    let fakes = ex
        .fakes
        .iter()
        .map(|c| {
            let mut g = Graph::new();
            let z = g.constant(c.z.clone());
            let v = gan.generate_var(&mut g, store, z, c.anchor, &c.noise)?;
            Ok(g.value(v).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, d) = disc_loss(gan, store, &[&ex.real], &fakes.iter().collect::<Vec<_>>());
    let (_, g) = gen_loss(gan, store, ex)?;
    Ok((d, g))
}

/// One discriminator update on detached fakes followed by one generator
/// update against the updated discriminator.
pub fn gan_step(store: &mut ParamStore, gan: &DgStyleGan, opt: &mut GanOptim, batch: &[GanExample], rates: GanRates) -> Result<GanLosses> {
    if batch.is_empty() {
        return Err(Error::domain("adversarial step needs a non-empty batch"));
    }
    let snapshot: &ParamStore = store;
    let pairs: Vec<(Matrix, Vec<Matrix>)> = batch
        .par_iter()
        .map(|ex| {
            let fakes = ex
                .fakes
                .iter()
                .map(|c| {
                    let mut g = Graph::new();
                    let z = g.constant(c.z.clone());
                    let v = gan.generate_var(&mut g, snapshot, z, c.anchor, &c.noise)?;
                    Ok(g.value(v).clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((ex.real.clone(), fakes))
        })
        .collect::<Result<_>>()?;
    let d_loss = discriminator_step(store, gan, opt, &pairs, rates.disc, rates.clip)?;
    let snapshot: &ParamStore = store;
    let parts: Vec<(f64, BTreeMap<String, Matrix>)> =
        batch.par_iter().map(|ex| gen_loss(gan, snapshot, ex)).collect::<Result<_>>()?;
    let g_loss = parts.iter().map(|p| p.0).sum::<f64>() / batch.len() as f64;
    let grads = sum_grads(parts.into_iter().map(|p| keep_prefix(p.1, "gen.")).collect());
    let grads = finish(grads, batch.len(), rates.clip)?;
    opt.gen.step(store, &grads, rates.gen);
    Ok(GanLosses { g_loss, d_loss })
}
