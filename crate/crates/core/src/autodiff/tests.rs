use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{central_difference, relative_error};
use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Compares the analytic gradient of `build` with respect to every entry of
/// every input against central differences.
fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[which]).cloned();
        for idx in 0..input.len() {
            let eval = |x: f64| {
                let mut perturbed = inputs.clone();
                perturbed[which].data_mut()[idx] = x;
                let mut g = Graph::new();
                let vars: Vec<Var> = perturbed.iter().map(|m| g.input(m.clone())).collect();
                let l = build(&mut g, &vars);
                g.value(l).item()
            };
            let numeric = central_difference(eval, input.data()[idx], 1e-6);
            let a = analytic.as_ref().map_or(0.0, |m| m.data()[idx]);
            assert!(
                relative_error(a, numeric, 1e-6) < 1e-5,
                "input {which} entry {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 4, &mut rng);
    let b = random(3, 4, &mut rng);
    check(vec![a, b], |g, v| {
        let x = g.mul(v[0], v[1]);
        let y = g.silu(x);
        let z = g.tanh(v[0]);
        let w = g.sub(y, z);
        let s = g.sigmoid(w);
        let sp = g.softplus(v[1]);
        let e = g.exp(sp);
        let t = g.add(s, e);
        let q = g.square(t);
        let r = g.scale(q, 0.3);
        let r = g.add_scalar(r, 2.0);
        let r = g.sqrt(r);
        let r = g.recip(r);
        g.sum_all(r)
    });
}

#[test]
fn matmul_and_broadcast_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(5, 3, &mut rng);
    let w = random(3, 4, &mut rng);
    let b = random(1, 4, &mut rng);
    let c = random(5, 1, &mut rng);
    check(vec![x, w, b, c], |g, v| {
        let y = g.affine(v[0], v[1], v[2]);
        let y = g.mul_row(y, v[2]);
        let y = g.mul_col(y, v[3]);
        let t = g.transpose(y);
        let t = g.reshape(t, 5, 4);
        let s = g.softmax_rows(t);
        let sr = g.sum_rows(s);
        let m = g.mean_rows(y);
        let p = g.mul(sr, m);
        g.sum_all(p)
    });
}

#[test]
fn grouping_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(6, 4, &mut rng);
    let y = random(2, 4, &mut rng);
    check(vec![x, y], |g, v| {
        let gm = g.group_max(v[0], 3);
        let gs = g.group_sum(v[0], 2);
        let gsm = g.group_softmax(v[0], 3);
        let sc = g.sum_col_blocks(gsm, 2);
        let rc = g.repeat_col_blocks(sc, 2);
        let gathered = g.gather(v[1], vec![1, 0, 1, 1, 0, 0]);
        let p = g.mul(rc, gathered);
        let cc = g.concat_cols(&[gm, v[1]]);
        let sl = g.slice_cols(cc, 2, 4);
        let cr = g.concat_rows(&[sl, gs]);
        let cl = g.clamp(cr, -0.5, 0.5);
        let a = g.sum_all(cl);
        let b = g.sum_all(p);
        let s = g.mul(a, b);
        let bc = g.broadcast_rows(s, 3);
        g.sum_all(bc)
    });
}

#[test]
fn chamfer_and_directed_distance_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(7, 3, &mut rng);
    let b = random(5, 3, &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.chamfer(v[0], v[1]));
    check(vec![a, b], |g, v| g.directed_distance(v[0], v[1]));
}

#[test]
fn shared_param_accumulates_gradient_from_both_uses() {
    let mut store = ParamStore::new();
    store.insert("m.w", Matrix::from_vec(1, 1, vec![2.0]));
    let mut g = Graph::new();
    let w1 = g.param(&store, "m.w");
    let w2 = g.param(&store, "m.w");
    assert_eq!(w1, w2);
    let x = g.constant(Matrix::scalar(3.0));
    let a = g.mul(w1, x);
    let b = g.mul(w2, w2);
    let s = g.add(a, b);
    let grads = g.backward(s).param_grads(&store);
    // d/dw (3w + w^2) = 3 + 2w = 7
    assert_eq!(grads["m.w"].item(), 7.0);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.input(Matrix::scalar(1.5));
    let d = g.detach(x);
    let y = g.mul(d, x);
    let grads = g.backward(y);
    assert_eq!(grads.wrt(x).unwrap().item(), 1.5);
    assert!(grads.wrt(d).is_none());
}
