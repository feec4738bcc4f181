//! Finite-difference checks for every differentiable primitive.
//!
//! Each case builds the same scalar loss twice: once on a tape whose
//! `backward` supplies analytic gradients, and once per perturbed parameter
//! element through central differences. The two must agree to first order.

use lenopt::{Tape, Tensor, Val};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Compares tape gradients of `build` against central differences on every
/// element of every leaf. `build` must construct the loss from the given
/// leaves alone so the perturbed rebuilds see the change.
fn check_grads(leaves: &[Tensor], build: &dyn Fn(&Tape, &[Val]) -> Val) {
    let tape = Tape::new();
    let vals: Vec<Val> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vals);
    let analytic = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let t = Tape::new();
        let vs: Vec<Val> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        t.item(build(&t, &vs))
    };

    for (li, leaf) in leaves.iter().enumerate() {
        let ga = analytic.get(vals[li]).unwrap();
        for ei in 0..leaf.numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ei] += H;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ei] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = ga.data()[ei];
            let tol = 1e-6 + 1e-4 * a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() <= tol,
                "leaf {li} elem {ei}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn matmul_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    check_grads(&[a, b], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq)
    });
}

#[test]
fn transpose_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&[2, 5], &mut rng);
    check_grads(&[a], &|t, v| {
        let at = t.transpose(v[0]).unwrap();
        let y = t.matmul(at, v[0]).unwrap();
        let s = t.scale(y, 0.25);
        t.sum_all(s)
    });
}

#[test]
fn elementwise_add_sub_mul() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&[3, 3], &mut rng);
    let b = rand_tensor(&[3, 3], &mut rng);
    check_grads(&[a, b], &|t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(v[0], v[1]).unwrap();
        let p = t.mul(s, d).unwrap(); // (a+b)(a-b)
        t.sum_all(p)
    });
}

#[test]
fn bias_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[4, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    check_grads(&[x, b], &|t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        let sq = t.mul(y, y).unwrap();
        t.sum_all(sq)
    });
}

#[test]
fn gelu_curvature() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&[2, 6], &mut rng);
    check_grads(&[x], &|t, v| {
        let g = t.gelu(v[0]);
        let sq = t.mul(g, g).unwrap();
        t.sum_all(sq)
    });
}

#[test]
fn softmax_with_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&[3, 4], &mut rng);
    let w = rand_tensor(&[3, 4], &mut rng);
    for temp in [0.5, 1.0, 2.0] {
        check_grads(&[x.clone(), w.clone()], &|t, v| {
            let s = t.softmax_rows(v[0], temp).unwrap();
            let weighted = t.mul(s, v[1]).unwrap();
            t.sum_all(weighted)
        });
    }
}

#[test]
fn log_softmax_with_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&[3, 4], &mut rng);
    let w = rand_tensor(&[3, 4], &mut rng);
    for temp in [0.5, 1.0, 3.0] {
        check_grads(&[x.clone(), w.clone()], &|t, v| {
            let s = t.log_softmax_rows(v[0], temp).unwrap();
            let weighted = t.mul(s, v[1]).unwrap();
            t.sum_all(weighted)
        });
    }
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&[3, 5], &mut rng);
    let g = rand_tensor(&[5], &mut rng);
    let b = rand_tensor(&[5], &mut rng);
    let w = rand_tensor(&[3, 5], &mut rng);
    check_grads(&[x, g, b, w], &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        let weighted = t.mul(y, v[3]).unwrap();
        t.sum_all(weighted)
    });
}

#[test]
fn gather_scatter_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&[5, 3], &mut rng);
    // gather with a repeated row exercises scatter-add in the backward pass
    check_grads(&[x.clone()], &|t, v| {
        let g = t.gather_rows(v[0], &[0, 2, 2, 4]).unwrap();
        let sq = t.mul(g, g).unwrap();
        t.sum_all(sq)
    });
    check_grads(&[x], &|t, v| {
        let g = t.gather_rows(v[0], &[1, 3]).unwrap();
        let sc = t.scatter_rows(g, &[4, 0], 5).unwrap();
        let sq = t.mul(sc, sc).unwrap();
        t.sum_all(sq)
    });
}

#[test]
fn slice_and_concat_cols() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = rand_tensor(&[3, 6], &mut rng);
    let y = rand_tensor(&[3, 2], &mut rng);
    check_grads(&[x, y], &|t, v| {
        let left = t.slice_cols(v[0], 0, 2).unwrap();
        let right = t.slice_cols(v[0], 4, 2).unwrap();
        let cat = t.concat_cols(&[left, v[1], right]).unwrap();
        let sq = t.mul(cat, cat).unwrap();
        t.sum_all(sq)
    });
}

#[test]
fn attention_shaped_composite() {
    // a single-head attention block end to end: the longest realistic chain
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_tensor(&[4, 6], &mut rng);
    let wq = rand_tensor(&[6, 6], &mut rng);
    let wk = rand_tensor(&[6, 6], &mut rng);
    let wv = rand_tensor(&[6, 6], &mut rng);
    let gain = rand_tensor(&[6], &mut rng);
    let bias = rand_tensor(&[6], &mut rng);
    check_grads(&[x, wq, wk, wv, gain, bias], &|t, v| {
        let q = t.matmul(v[0], v[1]).unwrap();
        let k = t.matmul(v[0], v[2]).unwrap();
        let val = t.matmul(v[0], v[3]).unwrap();
        let kt = t.transpose(k).unwrap();
        let scores = t.matmul(q, kt).unwrap();
        let scaled = t.scale(scores, 1.0 / (6.0f64).sqrt());
        let attn = t.softmax_rows(scaled, 1.0).unwrap();
        let ctx = t.matmul(attn, val).unwrap();
        let res = t.add(ctx, v[0]).unwrap();
        let normed = t.layer_norm(res, v[4], v[5], 1e-5).unwrap();
        let act = t.gelu(normed);
        let sq = t.mul(act, act).unwrap();
        t.sum_all(sq)
    });
}
