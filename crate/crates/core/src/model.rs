//! The full dual-path network: parameter layout, the variational forward
//! pass, the per-sample training pass and inference.
//!
//! The variational path works in the frame centred on the partial input's
//! centroid (the anchor). Outputs are shifted back before they leave the
//! module.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParamStore, Var};
use crate::cloud::sampling::{farthest_from_centroid, fps_indices};
use crate::cloud::{Point, PointCloud};
use crate::datasets::CompletionSample;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, LevelConfig};
use crate::error::{Error, Result};
use crate::fusion::{align_to, branch, deviation, fuse, fuse_graph, threshold_at, FusionBranch, FusionConfig};
use crate::latent::{standard_normal, GaussianHead, GaussianVars, LatentAssembler, LatentZ, PatchSampler};
use crate::objectives::{training_loss, LossInputs, LossReport, LossWeights};
use crate::refine::{LocalRefinement, RefineConfig};
use crate::stylegan::{blend_train, DgStyleGan, GanCondition, GanConfig, GanExample, StyleNoise};

/// Parameter groups updated by the variational optimizer.
pub const VARIATIONAL_GROUPS: [&str; 4] = ["enc", "lat", "lr", "dec"];
/// Parameter groups updated by the adversarial optimizers.
pub const ADVERSARIAL_GROUPS: [&str; 2] = ["gen", "disc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub refine: RefineConfig,
    pub decoder: DecoderConfig,
    pub gan: GanConfig,
    pub fusion: FusionConfig,
    /// Partial clouds are resampled to this size before encoding.
    pub partial_size: usize,
    pub z_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            refine: RefineConfig::default(),
            decoder: DecoderConfig::default(),
            gan: GanConfig::default(),
            fusion: FusionConfig::default(),
            partial_size: 2048,
            z_dim: 128,
        }
    }
}

impl ModelConfig {
    /// Small network for synthetic experiments and tests.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                levels: vec![LevelConfig::new(128, 16, 32), LevelConfig::new(32, 8, 64)],
                attention_heads: 2,
                attention_neighbors: 8,
                latent_dim: 16,
            },
            refine: RefineConfig {
                up_ratio: 2,
                level: 0,
                coarse_size: 256,
            },
            decoder: DecoderConfig {
                coarse_size: 256,
                fine_size: 1024,
                scales: vec![32, 48],
                branches: 3,
            },
            gan: GanConfig {
                fine_size: 1024,
                stages: 3,
                channels: 32,
                style_dim: 32,
                noise_dim: 8,
                disc_widths: vec![32, 64],
                blend_weight: 0.5,
                recon_weight: 1.0,
            },
            fusion: FusionConfig::default(),
            partial_size: 512,
            z_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.refine.validate(self.encoder.levels.len())?;
        self.decoder.validate()?;
        self.gan.validate()?;
        self.fusion.validate()?;
        if self.gan.fine_size != self.decoder.fine_size {
            return Err(Error::config("gan.fine_size", "must equal decoder.fine_size"));
        }
        if self.partial_size < self.encoder.min_input_points() {
            return Err(Error::config(
                "model.partial_size",
                format!("must be at least {}", self.encoder.min_input_points()),
            ));
        }
        if self.z_dim == 0 {
            return Err(Error::config("model.z_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Mixes seed components into one stream seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Random-stream purposes, mixed into [`derive_seed`].
pub mod purpose {
    pub const PATCH_SAMPLES: u64 = 1;
    pub const CODE: u64 = 2;
    pub const TARGET_CODE: u64 = 3;
    pub const STYLE_TARGET: u64 = 4;
    pub const STYLE_PARTIAL: u64 = 5;
    pub const INFERENCE: u64 = 6;
}

/// Noise for one variational pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PassNoise {
    /// `N_p × latent_dim`, one row per patch.
    pub patches: Matrix,
    /// `1 × latent_dim`.
    pub code: Matrix,
}

/// Graph nodes of one variational pass, all in the centred frame.
#[derive(Clone, Debug)]
pub struct VariationalVars {
    pub anchor: Point,
    pub x: Var,
    pub p_x: GaussianVars,
    pub t_p: Var,
    pub refined: Var,
    pub z: Var,
    pub coarse: Var,
    pub fine: Var,
}

/// Everything produced for one partial input.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionBundle {
    pub refined: PointCloud,
    pub coarse: PointCloud,
    pub y_v: PointCloud,
    pub y_g: PointCloud,
    pub y_out: PointCloud,
    pub deviation: f64,
    pub threshold: f64,
    pub branch: FusionBranch,
    pub latent: LatentZ,
}

/// Result of the variational training pass on one sample.
#[derive(Clone, Debug)]
pub struct SamplePass {
    pub grads: BTreeMap<String, Matrix>,
    pub report: LossReport,
    pub deviation: f64,
    pub branch: FusionBranch,
    /// Detached inputs for the adversarial update.
    pub gan: GanExample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualGenerator {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub head_p: GaussianHead,
    pub head_q: GaussianHead,
    pub patch_sampler: PatchSampler,
    pub assembler: LatentAssembler,
    pub refine: LocalRefinement,
    pub decoder: Decoder,
    pub gan: DgStyleGan,
}

fn offset(m: &Matrix, t: Point, sign: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (k, v) in out.row_mut(r).iter_mut().enumerate() {
            *v += sign * t[k];
        }
    }
    out
}

fn to_cloud(m: &Matrix, anchor: Point) -> Result<PointCloud> {
    PointCloud::from_matrix(&offset(m, anchor, 1.0))
}

fn fps_cloud(c: &PointCloud, k: usize) -> Result<PointCloud> {
    if k >= c.len() {
        return c.resample(k);
    }
    Ok(c.select(&fps_indices(c.points(), k, farthest_from_centroid(c.points()))?))
}

impl DualGenerator {
    /// Builds the network and initializes its parameters into `store`.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.encoder.latent_dim;
        let encoder = Encoder::new(store, &cfg.encoder, &mut rng)?;
        let gdim = encoder.global_dim();
        let level = &cfg.encoder.levels[cfg.refine.level];
        Ok(Self {
            head_p: GaussianHead::new(store, "lat.p", gdim, d, &mut rng),
            head_q: GaussianHead::new(store, "lat.q", gdim, d, &mut rng),
            patch_sampler: PatchSampler::new(store, "lat.tp", d, level.group_size, &mut rng),
            assembler: LatentAssembler::new(store, "lat.z", d, gdim, cfg.z_dim, &mut rng),
            refine: LocalRefinement::new(store, cfg.refine, level.feature_dim, level.group_size, &mut rng),
            decoder: Decoder::new(store, &cfg.decoder, cfg.z_dim, &mut rng)?,
            gan: DgStyleGan::new(store, &cfg.gan, cfg.z_dim, &mut rng)?,
            encoder,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Patch count feeding the local refinement module.
    pub fn num_patches(&self) -> usize {
        self.cfg.encoder.levels[self.cfg.refine.level].n_points
    }

    pub fn pass_noise(&self, seed: u64) -> PassNoise {
        let d = self.cfg.encoder.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, purpose::PATCH_SAMPLES]));
        let patches = standard_normal(self.num_patches(), d, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, purpose::CODE]));
        let code = standard_normal(1, d, &mut rng);
        PassNoise { patches, code }
    }

    /// Partial input resampled to the canonical size.
    pub fn prepare_partial(&self, x: &PointCloud) -> Result<PointCloud> {
        x.resample(self.cfg.partial_size)
    }

    /// Encoder, `p_ψ(z|X)`, local refinement, latent assembly and both
    /// decoder stages on a partial cloud.
    pub fn variational(&self, g: &mut Graph, store: &ParamStore, x: &PointCloud, noise: &PassNoise) -> Result<VariationalVars> {
        let xr = self.prepare_partial(x)?;
        let anchor = xr.centroid();
        let xv = g.constant(offset(&xr.to_matrix(), anchor, -1.0));
        let enc = self.encoder.forward(g, store, xv)?;
        let p_x = self.head_p.forward(g, store, enc.global);
        let t_p = self.patch_sampler.forward(g, store, p_x, noise.patches.clone());
        let ro = self.refine.forward(g, store, &enc.levels[self.cfg.refine.level], t_p, xv)?;
        let refined = ro.upsample.coarse;
        let code = crate::latent::sample_graph(g, p_x, noise.code.clone());
        let z = self.assembler.forward(g, store, code, enc.global, refined);
        let coarse = self.decoder.decode_coarse(g, store, z, refined)?;
        let fine = self.decoder.decode_fine(g, store, coarse, z)?.points;
        Ok(VariationalVars {
            anchor,
            x: xv,
            p_x,
            t_p,
            refined,
            z,
            coarse,
            fine,
        })
    }

    /// `q_φ(z|Y)` and a detached `Z_Y` built from the complete cloud, in the
    /// frame centred on `Y`'s own centroid.
    fn target_latent(&self, g: &mut Graph, store: &ParamStore, y: &PointCloud, seed: u64) -> Result<(GaussianVars, LatentZ)> {
        let anchor = y.centroid();
        let yc = y.translated(anchor.map(|v| -v));
        let yv = g.constant(yc.to_matrix());
        let enc = self.encoder.forward(g, store, yv)?;
        let q_y = self.head_q.forward(g, store, enc.global);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, purpose::TARGET_CODE]));
        let eps = standard_normal(1, self.cfg.encoder.latent_dim, &mut rng);
        let qd = GaussianVars {
            mean: g.detach(q_y.mean),
            log_var: g.detach(q_y.log_var),
        };
        let code = crate::latent::sample_graph(g, qd, eps);
        let coarse = g.constant(fps_cloud(&yc, self.cfg.decoder.coarse_size)?.to_matrix());
        let global = g.detach(enc.global);
        let z = self.assembler.forward(g, store, code, global, coarse);
        let z = g.detach(z);
        Ok((
            q_y,
            LatentZ {
                z: g.value(z).data().to_vec(),
                t_p: None,
                anchor,
            },
        ))
    }

    fn generate_values(&self, store: &ParamStore, z: &[f64], anchor: Point, noise: &StyleNoise) -> Result<Matrix> {
        let mut g = Graph::new();
        let zv = g.constant(Matrix::row_vector(z.to_vec()));
        let out = self.gan.generate_var(&mut g, store, zv, anchor, noise)?;
        Ok(g.value(out).clone())
    }

    /// Loss, variational gradients and adversarial inputs for one sample.
    /// `seed` should be unique per (run, step, sample).
    pub fn training_pass(
        &self,
        store: &ParamStore,
        sample: &CompletionSample,
        weights: &LossWeights,
        epoch: usize,
        seed: u64,
    ) -> Result<SamplePass> {
        let mut g = Graph::new();
        let vars = self.variational(&mut g, store, &sample.partial, &self.pass_noise(seed))?;
        let (q_y, z_y) = self.target_latent(&mut g, store, &sample.complete, seed)?;
        let y = &sample.complete;
        let fine = self.cfg.decoder.fine_size;
        let noise_dim = self.cfg.gan.noise_dim;

        // Training-time Y_g: real/fake blend, detached, in the centred frame.
        let w_y = StyleNoise::sample(noise_dim, derive_seed(&[seed, purpose::STYLE_TARGET]));
        let fake_y = self.generate_values(store, &z_y.z, z_y.anchor, &w_y)?;
        let real = y.resample(fine)?;
        let y_g = blend_train(&real, &PointCloud::from_matrix(&fake_y)?, self.cfg.gan.blend_weight)?;
        let y_g = offset(&y_g.to_matrix(), vars.anchor, -1.0);

        let y_v = PointCloud::from_matrix(g.value(vars.fine))?;
        let y_gc = PointCloud::from_matrix(&y_g)?;
        let s = deviation(&align_to(&y_gc, &y_v), &y_v)?;
        let s_t = threshold_at(epoch, &self.cfg.fusion);
        let out = fuse_graph(&mut g, &y_g, vars.fine, s, s_t, self.cfg.fusion.w_s)?;

        let target = g.constant(offset(&y.to_matrix(), vars.anchor, -1.0));
        let inputs = LossInputs {
            q_y,
            p_x: vars.p_x,
            coarse: vars.coarse,
            fine: vars.fine,
            out,
            refined: vars.refined,
            target,
        };
        let (loss, report) = training_loss(&mut g, inputs, weights, epoch);
        check_report(&report)?;
        let grads = g
            .backward(loss)
            .param_grads(store)
            .into_iter()
            .filter(|(k, _)| VARIATIONAL_GROUPS.iter().any(|p| k.split('.').next() == Some(p)))
            .collect();

        let z_x = g.value(vars.z).data().to_vec();
        let w_x = StyleNoise::sample(noise_dim, derive_seed(&[seed, purpose::STYLE_PARTIAL]));
        let y_m = y.to_matrix();
        let gan = GanExample {
            real: real.to_matrix(),
            fakes: vec![
                GanCondition {
                    z: Matrix::row_vector(z_y.z),
                    anchor: z_y.anchor,
                    noise: w_y,
                    target: Some(y_m.clone()),
                },
                GanCondition {
                    z: Matrix::row_vector(z_x),
                    anchor: vars.anchor,
                    noise: w_x,
                    target: Some(y_m),
                },
            ],
        };
        Ok(SamplePass {
            grads,
            report,
            deviation: s,
            branch: branch(s, s_t),
            gan,
        })
    }

    /// Completes a partial cloud. Reads nothing but `x`, the parameters and
    /// the seed. `epoch` selects the fusion threshold.
    pub fn infer(&self, store: &ParamStore, x: &PointCloud, epoch: usize, seed: u64) -> Result<CompletionBundle> {
        let mut g = Graph::new();
        let vars = self.variational(&mut g, store, x, &self.pass_noise(derive_seed(&[seed, purpose::INFERENCE])))?;
        let a = vars.anchor;
        let z = g.value(vars.z).data().to_vec();
        let noise = StyleNoise::sample(self.cfg.gan.noise_dim, derive_seed(&[seed, purpose::STYLE_PARTIAL]));
        let y_g = PointCloud::from_matrix(&self.generate_values(store, &z, a, &noise)?)?;
        let y_v = to_cloud(g.value(vars.fine), a)?;
        let s = deviation(&align_to(&y_g, &y_v), &y_v)?;
        let s_t = threshold_at(epoch, &self.cfg.fusion);
        let y_out = fuse(&y_g, &y_v, s, s_t, self.cfg.fusion.w_s)?;
        Ok(CompletionBundle {
            refined: to_cloud(g.value(vars.refined), a)?,
            coarse: to_cloud(g.value(vars.coarse), a)?,
            y_v,
            y_g,
            y_out,
            deviation: s,
            threshold: s_t,
            branch: branch(s, s_t),
            latent: LatentZ {
                z,
                t_p: Some(g.value(vars.t_p).data().to_vec()),
                anchor: a,
            },
        })
    }
}

fn check_report(r: &LossReport) -> Result<()> {
    for (name, v) in [
        ("kl_adv", r.kl_adv),
        ("kl_var", r.kl_var),
        ("cd_coarse", r.cd_coarse),
        ("cd_fine", r.cd_fine),
        ("cd_out", r.cd_out),
        ("partial", r.partial),
        ("total", r.total),
    ] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("loss term {name}")));
        }
    }
    Ok(())
}
