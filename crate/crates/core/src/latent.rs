//! Diagonal Gaussian codes, their KL divergences, reparameterized sampling,
//! and assembly of the latent `Z` consumed by the decoder and generator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Linear, Matrix, Mlp, ParamStore, Var};
use crate::cloud::{Point, PointCloud};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianLatent {
    /// Validates finiteness and equal length; clamps `log_var` into
    /// `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::domain(format!(
                "mean has {} entries but log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::domain("Gaussian latent must have positive dimension"));
        }
        if !mean.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::non_finite("Gaussian latent parameters"));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Density log-likelihood of `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * (ln2pi + lv + (xi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// `KL[q ‖ N(0, I)] = ½ Σ (μ² + σ² − log σ² − 1)`.
pub fn kl_to_standard_normal(q: &GaussianLatent) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// `KL[p ‖ q]` for diagonal Gaussians of equal dimension.
pub fn kl_between(p: &GaussianLatent, q: &GaussianLatent) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::domain(format!(
            "KL between Gaussians of dimension {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok((0..p.dim())
        .map(|d| {
            let (mp, lp, mq, lq) = (p.mean[d], p.log_var[d], q.mean[d], q.log_var[d]);
            0.5 * ((lp - lq).exp() + (mq - mp).powi(2) / lq.exp() - 1.0 + lq - lp)
        })
        .sum())
}

/// `μ + σ ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn sample(q: &GaussianLatent, rng: &mut impl Rng) -> Vec<f64> {
    q.mean
        .iter()
        .zip(q.std())
        .map(|(m, s)| m + s * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect()
}

/// `rows × dim` standard normal draws.
pub fn standard_normal(rows: usize, dim: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        dim,
        (0..rows * dim).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

/// Gaussian parameters as graph nodes, each `1 × D`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    pub fn values(&self, g: &Graph) -> GaussianLatent {
        GaussianLatent {
            mean: g.value(self.mean).data().to_vec(),
            log_var: g.value(self.log_var).data().to_vec(),
        }
    }

    pub fn constant(g: &mut Graph, q: &GaussianLatent) -> Self {
        Self {
            mean: g.constant(Matrix::row_vector(q.mean.clone())),
            log_var: g.constant(Matrix::row_vector(q.log_var.clone())),
        }
    }

    pub fn input(g: &mut Graph, q: &GaussianLatent) -> Self {
        Self {
            mean: g.input(Matrix::row_vector(q.mean.clone())),
            log_var: g.input(Matrix::row_vector(q.log_var.clone())),
        }
    }
}

pub fn kl_to_standard_normal_graph(g: &mut Graph, q: GaussianVars) -> Var {
    let m2 = g.square(q.mean);
    let var = g.exp(q.log_var);
    let t = g.add(m2, var);
    let t = g.sub(t, q.log_var);
    let t = g.add_scalar(t, -1.0);
    let s = g.sum_all(t);
    g.scale(s, 0.5)
}

pub fn kl_between_graph(g: &mut Graph, p: GaussianVars, q: GaussianVars) -> Var {
    let dl = g.sub(p.log_var, q.log_var);
    let ratio = g.exp(dl);
    let dm = g.sub(q.mean, p.mean);
    let dm2 = g.square(dm);
    let neg_lq = g.scale(q.log_var, -1.0);
    let inv_vq = g.exp(neg_lq);
    let maha = g.mul(dm2, inv_vq);
    let t = g.add(ratio, maha);
    let t = g.sub(t, dl);
    let t = g.add_scalar(t, -1.0);
    let s = g.sum_all(t);
    g.scale(s, 0.5)
}

/// Reparameterized draws: one row per row of `eps` (`n × D`).
pub fn sample_graph(g: &mut Graph, q: GaussianVars, eps: Matrix) -> Var {
    let eps = g.constant(eps);
    let half = g.scale(q.log_var, 0.5);
    let std = g.exp(half);
    let scaled = g.mul_row(eps, std);
    g.add_row(scaled, q.mean)
}

/// MLP reading `(mean, log_var)` from a global encoder feature. The log
/// variance is clamped into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussianHead {
    mlp: Mlp,
    dim: usize,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = in_dim.max(dim);
        Self {
            mlp: Mlp::new(store, name, &[in_dim, hidden, 2 * dim], rng),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, global: Var) -> GaussianVars {
        let out = self.mlp.forward(g, store, global);
        let mean = g.slice_cols(out, 0, self.dim);
        let lv = g.slice_cols(out, self.dim, self.dim);
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        GaussianVars { mean, log_var }
    }
}

/// Latent space consumed by the decoder and generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentZ {
    /// Assembled code, length `z_dim`.
    pub z: Vec<f64>,
    /// Per-patch samples `T_p` (`N_p × S_p`) when produced by the
    /// variational path.
    pub t_p: Option<Vec<f64>>,
    /// Centroid of the encoded cloud; generated clouds are placed around it.
    pub anchor: Point,
}

/// Bias-free linear assembly of `Z` from the sampled code, the global
/// encoder feature and a max-pooled embedding of the coarse cloud.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentAssembler {
    code: Linear,
    feature: Linear,
    coarse: Linear,
    code_dim: usize,
    feature_dim: usize,
    z_dim: usize,
}

impl LatentAssembler {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        code_dim: usize,
        feature_dim: usize,
        z_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            code: Linear::no_bias(store, &format!("{name}.code"), code_dim, z_dim, rng),
            feature: Linear::no_bias(store, &format!("{name}.feat"), feature_dim, z_dim, rng),
            coarse: Linear::no_bias(store, &format!("{name}.coarse"), 3, z_dim, rng),
            code_dim,
            feature_dim,
            z_dim,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    /// `sampled: 1×code_dim`, `global: 1×feature_dim`, `coarse: n×3` → `1×z_dim`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sampled: Var, global: Var, coarse: Var) -> Var {
        let a = self.code.forward(g, store, sampled);
        let b = self.feature.forward(g, store, global);
        let c = self.coarse.forward(g, store, coarse);
        let n = g.value(coarse).rows();
        let c = g.group_max(c, n);
        let ab = g.add(a, b);
        g.add(ab, c)
    }

    fn check(&self, sampled: usize, global: usize) -> Result<()> {
        if sampled != self.code_dim {
            return Err(Error::shape("sampled code", self.code_dim, sampled));
        }
        if global != self.feature_dim {
            return Err(Error::shape("encoder global feature", self.feature_dim, global));
        }
        Ok(())
    }
}

/// Value-level assembly of `Z`. `coarse` is expressed in the encoder's
/// centred frame.
pub fn assemble_latent(
    sampled: &[f64],
    enc: &EncoderOutput,
    coarse: &PointCloud,
    assembler: &LatentAssembler,
    store: &ParamStore,
) -> Result<LatentZ> {
    assembler.check(sampled.len(), enc.global.len())?;
    let mut g = Graph::new();
    let s = g.constant(Matrix::row_vector(sampled.to_vec()));
    let f = g.constant(Matrix::row_vector(enc.global.clone()));
    let c = g.constant(coarse.to_matrix());
    let z = assembler.forward(&mut g, store, s, f, c);
    let z = g.value(z).data().to_vec();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("latent assembly"));
    }
    Ok(LatentZ {
        z,
        t_p: None,
        anchor: [0.0; 3],
    })
}

/// Projection of per-patch code draws to the `N_p × S_p` samples `T_p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSampler {
    proj: Linear,
}

impl PatchSampler {
    pub fn new(store: &mut ParamStore, name: &str, code_dim: usize, group_size: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::no_bias(store, name, code_dim, group_size, rng),
        }
    }

    /// One independent draw of `q` per patch (`eps: N_p × D`), projected to
    /// `N_p × S_p`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: GaussianVars, eps: Matrix) -> Var {
        let z = sample_graph(g, q, eps);
        self.proj.forward(g, store, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_latent(d: usize, rng: &mut ChaCha8Rng) -> GaussianLatent {
        GaussianLatent::new(
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_to_standard_normal(&GaussianLatent::standard(5)), 0.0);
        let q = GaussianLatent::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(kl_to_standard_normal(&q), 0.5);
        let p = GaussianLatent::standard(1);
        let q = GaussianLatent::new(vec![0.0], vec![1.0]).unwrap();
        // σp² = 1, σq² = e.
        let expect = 0.5 * (1.0 / std::f64::consts::E + 0.0 - 1.0 + 1.0);
        assert!((kl_between(&p, &q).unwrap() - expect).abs() < 1e-15);
        assert_eq!(kl_between(&p, &p).unwrap(), 0.0);
        assert!(kl_between(&p, &GaussianLatent::standard(2)).is_err());
    }

    #[test]
    fn log_var_is_clamped() {
        let q = GaussianLatent::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(q.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
        assert!(GaussianLatent::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn tight_latent_samples_stay_near_mean() {
        let q = GaussianLatent::new(vec![0.3, -0.7], vec![-10.0, -10.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let near = (0..100)
            .filter(|_| {
                sample(&q, &mut rng)
                    .iter()
                    .zip(q.mean())
                    .all(|(s, m)| (s - m).abs() < 0.05)
            })
            .count();
        assert!(near >= 99);
    }

    #[test]
    fn sampling_is_deterministic_and_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_latent(4, &mut rng);
        let a = sample(&q, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample(&q, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let n = 100_000;
        let mut acc = vec![0.0; 4];
        for _ in 0..n {
            for (a, s) in acc.iter_mut().zip(sample(&q, &mut rng)) {
                *a += s / n as f64;
            }
        }
        for ((m, s), est) in q.mean().iter().zip(q.std()).zip(acc) {
            assert!((est - m).abs() < 3.0 * s / (n as f64).sqrt());
        }
    }

    #[test]
    fn graph_kls_match_closed_forms_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let p = random_latent(8, &mut rng);
            let q = random_latent(8, &mut rng);
            let mut g = Graph::new();
            let pv = GaussianVars::input(&mut g, &p);
            let qv = GaussianVars::input(&mut g, &q);
            let k1 = kl_to_standard_normal_graph(&mut g, qv);
            let k2 = kl_between_graph(&mut g, pv, qv);
            assert!((g.value(k1).item() - kl_to_standard_normal(&q)).abs() < 1e-12);
            assert!((g.value(k2).item() - kl_between(&p, &q).unwrap()).abs() < 1e-12);
            let total = g.add(k1, k2);
            let grads = g.backward(total);
            let f = |p: &GaussianLatent, q: &GaussianLatent| kl_to_standard_normal(q) + kl_between(p, q).unwrap();
            for d in 0..8 {
                let checks: [(Var, &dyn Fn(f64) -> f64, f64); 4] = [
                    (pv.mean, &|v| { let mut m = p.mean.clone(); m[d] = v; f(&GaussianLatent { mean: m, ..p.clone() }, &q) }, p.mean[d]),
                    (pv.log_var, &|v| { let mut l = p.log_var.clone(); l[d] = v; f(&GaussianLatent { log_var: l, ..p.clone() }, &q) }, p.log_var[d]),
                    (qv.mean, &|v| { let mut m = q.mean.clone(); m[d] = v; f(&p, &GaussianLatent { mean: m, ..q.clone() }) }, q.mean[d]),
                    (qv.log_var, &|v| { let mut l = q.log_var.clone(); l[d] = v; f(&p, &GaussianLatent { log_var: l, ..q.clone() }) }, q.log_var[d]),
                ];
                for (var, func, x) in checks {
                    let numeric = central_difference(func, x, 1e-6);
                    let analytic = grads.wrt(var).unwrap().data()[d];
                    assert!(relative_error(analytic, numeric, 1e-8) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn zero_inputs_assemble_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let asm = LatentAssembler::new(&mut store, "lat.asm", 4, 6, 10, &mut rng);
        let enc = EncoderOutput {
            levels: vec![],
            global: vec![0.0; 6],
            z_g: GaussianLatent::standard(4),
        };
        let coarse = PointCloud::new(vec![[0.0; 3]; 5]).unwrap();
        let z = assemble_latent(&[0.0; 4], &enc, &coarse, &asm, &store).unwrap();
        assert_eq!(z.z, vec![0.0; 10]);
        assert!(assemble_latent(&[0.0; 3], &enc, &coarse, &asm, &store).is_err());
    }

    #[test]
    fn assembly_is_lipschitz_in_the_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let asm = LatentAssembler::new(&mut store, "lat.asm", 4, 6, 10, &mut rng);
        let w = store.get("lat.asm.code.w").unwrap();
        // Spectral norm ≤ Frobenius norm.
        let lip = w.sq_norm().sqrt();
        let enc = EncoderOutput {
            levels: vec![],
            global: (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            z_g: GaussianLatent::standard(4),
        };
        let pts: Vec<Point> = (0..20).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect();
        let coarse = PointCloud::new(pts).unwrap();
        for _ in 0..50 {
            let s: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let delta: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let s2: Vec<f64> = s.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let z1 = assemble_latent(&s, &enc, &coarse, &asm, &store).unwrap().z;
            let z2 = assemble_latent(&s2, &enc, &coarse, &asm, &store).unwrap().z;
            let dz: f64 = z1.iter().zip(&z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dd: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            assert!(dz <= lip * dd * (1.0 + 1e-9));
        }
    }
}
