use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::params::ParamStore;

/// Adam optimizer state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of every parameter named in `grads`.
    /// A zero learning rate leaves parameters bitwise unchanged.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if lr != 0.0 {
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *pi -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Matrix>) -> f64 {
    grads.values().map(Matrix::sq_norm).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Sum gradient maps in iteration order of `parts`.
pub fn sum_grads(parts: Vec<BTreeMap<String, Matrix>>) -> BTreeMap<String, Matrix> {
    let mut out: BTreeMap<String, Matrix> = BTreeMap::new();
    for part in parts {
        for (k, g) in part {
            match out.get_mut(&k) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(k, g);
                }
            }
        }
    }
    out
}
