//! Every graph op against central finite differences on random inputs, plus
//! the checker's own sanity cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlhaif_core::nn::{finite_diff_check, Graph, ParamSet, ParamVars, Tensor, Var};
use rlhaif_core::Result;

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 100;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values in [lo, hi] kept at least `gap` away from each point in `avoid`.
fn uniform_avoiding(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, avoid: &[f32], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if avoid.iter().all(|a| (v - a).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * w)` with a fixed random `w`, so every output element gets a
/// distinct upstream gradient. `w` has variance `1/n` to keep the loss O(1).
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let std = 1.0 / (shape.iter().product::<usize>() as f32).sqrt();
    let w = g.constant(Tensor::randn(&shape, std, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x77)))?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

type Build = fn(&mut Graph, &ParamVars, u64) -> Result<Var>;

fn run(name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor)>, build: Build) {
    run_with(name, EPS, inputs, build)
}

fn run_with(name: &str, eps: f32, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<(&'static str, Tensor)>, build: Build) {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (n, t) in inputs(&mut rng) {
            params.insert(n, t).unwrap();
        }
        let loss = |g: &mut Graph, p: &ParamVars| build(g, p, seed);
        worst = worst.max(finite_diff_check(&loss, &params, eps).unwrap());
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

fn unary(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor)> {
    vec![("x", randn(rng, &[3, 4]))]
}

fn binary(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor)> {
    vec![("a", randn(rng, &[3, 4])), ("b", randn(rng, &[3, 4]))]
}

macro_rules! unary_op {
    ($test:ident, $body:expr) => {
        #[test]
        fn $test() {
            run(stringify!($test), unary, |g, p, s| {
                let x = p.get("x")?;
                let f: fn(&mut Graph, Var) -> Result<Var> = $body;
                let y = f(g, x)?;
                weighted(g, y, s)
            });
        }
    };
}

unary_op!(scale, |g, x| g.scale(x, -1.7));
unary_op!(add_scalar, |g, x| g.add_scalar(x, 0.3));
unary_op!(neg, |g, x| g.neg(x));
unary_op!(exp, |g, x| g.exp(x));
unary_op!(sigmoid, |g, x| g.sigmoid(x));
unary_op!(log_sigmoid, |g, x| g.log_sigmoid(x));
unary_op!(tanh, |g, x| g.tanh(x));
unary_op!(gelu, |g, x| g.gelu(x));
unary_op!(softmax, |g, x| g.softmax(x));
unary_op!(log_softmax, |g, x| g.log_softmax(x));
unary_op!(sum, |g, x| g.sum(x));
unary_op!(mean, |g, x| g.mean(x));
unary_op!(reshape, |g, x| g.reshape(x, &[2, 6]));
unary_op!(slice_rows, |g, x| g.slice_rows(x, 1, 2));
unary_op!(slice_cols, |g, x| g.slice_cols(x, 1, 2));
unary_op!(gather_rows, |g, x| g.gather_rows(x, &[2, 0, 2, 1]));
unary_op!(pick_cols, |g, x| g.pick_cols(x, &[3, 0, 1]));
unary_op!(concat_rows, |g, x| {
    let a = g.slice_rows(x, 0, 1)?;
    g.concat_rows(&[x, a])
});
unary_op!(concat_cols, |g, x| {
    let a = g.slice_cols(x, 2, 2)?;
    g.concat_cols(&[a, x])
});
unary_op!(self_mul, |g, x| g.mul(x, x));

#[test]
fn log() {
    run("log", |r| vec![("x", uniform_avoiding(r, &[3, 4], 0.2, 3.0, &[], 0.0))], |g, p, s| {
        let y = g.log(p.get("x")?)?;
        weighted(g, y, s)
    });
}

#[test]
fn clamp() {
    run("clamp", |r| vec![("x", uniform_avoiding(r, &[3, 4], -2.0, 2.0, &[-0.5, 0.8], 0.01))], |g, p, s| {
        let y = g.clamp(p.get("x")?, -0.5, 0.8)?;
        weighted(g, y, s)
    });
}

macro_rules! binary_op {
    ($test:ident, $op:ident) => {
        #[test]
        fn $test() {
            run(stringify!($test), binary, |g, p, s| {
                let y = g.$op(p.get("a")?, p.get("b")?)?;
                weighted(g, y, s)
            });
        }
    };
}

binary_op!(add, add);
binary_op!(sub, sub);
binary_op!(mul, mul);

#[test]
fn minimum() {
    // keep |a - b| away from the kink
    run(
        "minimum",
        |r| {
            let a = randn(r, &[3, 4]);
            let d = uniform_avoiding(r, &[3, 4], -2.0, 2.0, &[0.0], 0.01);
            let b: Vec<f32> = a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect();
            vec![("a", a), ("b", Tensor::new(vec![3, 4], b).unwrap())]
        },
        |g, p, s| {
            let y = g.minimum(p.get("a")?, p.get("b")?)?;
            weighted(g, y, s)
        },
    );
}

#[test]
fn matmul() {
    run("matmul", |r| vec![("a", randn(r, &[3, 4])), ("b", randn(r, &[4, 5]))], |g, p, s| {
        let y = g.matmul(p.get("a")?, p.get("b")?)?;
        weighted(g, y, s)
    });
}

#[test]
fn matmul_bt() {
    run("matmul_bt", |r| vec![("a", randn(r, &[3, 4])), ("b", randn(r, &[5, 4]))], |g, p, s| {
        let y = g.matmul_bt(p.get("a")?, p.get("b")?)?;
        weighted(g, y, s)
    });
}

#[test]
fn add_bias() {
    run("add_bias", |r| vec![("x", randn(r, &[3, 4])), ("b", randn(r, &[4]))], |g, p, s| {
        let y = g.add_bias(p.get("x")?, p.get("b")?)?;
        weighted(g, y, s)
    });
}

#[test]
fn causal_softmax() {
    run("causal_softmax", |r| vec![("x", randn(r, &[5, 5]))], |g, p, s| {
        let y = g.causal_softmax(p.get("x")?, 0.5)?;
        weighted(g, y, s)
    });
}

#[test]
fn layer_norm() {
    run(
        "layer_norm",
        |r| vec![("x", randn(r, &[3, 6])), ("gamma", randn(r, &[6])), ("beta", randn(r, &[6]))],
        |g, p, s| {
            let y = g.layer_norm(p.get("x")?, p.get("gamma")?, p.get("beta")?)?;
            weighted(g, y, s)
        },
    );
}

#[test]
fn embedding() {
    run("embedding", |r| vec![("table", randn(r, &[6, 3]))], |g, p, s| {
        let y = g.embedding(p.get("table")?, &[4, 1, 4, 0, 5])?;
        weighted(g, y, s)
    });
}

/// Pre-norm attention plus MLP block on random input. Losses here reach
/// O(10), where f32 rounding at a 1e-3 step already costs ~1e-3 of accuracy,
/// so the block uses the largest allowed step.
#[test]
fn transformer_block() {
    const D: usize = 8;
    run_with(
        "transformer_block",
        1e-2,
        |r| {
            vec![
                ("x", randn(r, &[5, D])),
                ("ln.g", uniform_avoiding(r, &[D], 0.5, 1.5, &[], 0.0)),
                ("ln.b", randn(r, &[D])),
                ("wq", Tensor::randn(&[D, D], 0.4, r)),
                ("wk", Tensor::randn(&[D, D], 0.4, r)),
                ("wv", Tensor::randn(&[D, D], 0.4, r)),
                ("w1", Tensor::randn(&[D, 2 * D], 0.4, r)),
                ("w2", Tensor::randn(&[2 * D, D], 0.4, r)),
            ]
        },
        |g, p, s| {
            let x = p.get("x")?;
            let h = g.layer_norm(x, p.get("ln.g")?, p.get("ln.b")?)?;
            let q = g.matmul(h, p.get("wq")?)?;
            let k = g.matmul(h, p.get("wk")?)?;
            let v = g.matmul(h, p.get("wv")?)?;
            let scores = g.matmul_bt(q, k)?;
            let att = g.causal_softmax(scores, 1.0 / (D as f32).sqrt())?;
            let mixed = g.matmul(att, v)?;
            let x = g.add(x, mixed)?;
            let f = g.matmul(x, p.get("w1")?)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p.get("w2")?)?;
            let y = g.add(x, f)?;
            weighted(g, y, s)
        },
    );
}

#[test]
fn linear_loss_is_exact() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::from_vec(vec![0.5, -1.0, 2.0])).unwrap();
    let loss = |g: &mut Graph, p: &ParamVars| {
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, -3.0]))?;
        let y = g.mul(p.get("w")?, x)?;
        g.sum(y)
    };
    // a power-of-two step keeps every f32 evaluation exact
    assert!(finite_diff_check(&loss, &params, 2f32.powi(-10)).unwrap() < 1e-6);
}

#[test]
fn planted_fault_is_detected() {
    use rlhaif_core::nn::{compare_gradients, forward_backward};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    params.insert("a", randn(&mut rng, &[3, 4])).unwrap();
    params.insert("b", randn(&mut rng, &[4, 2])).unwrap();
    let loss = |g: &mut Graph, p: &ParamVars| {
        let y = g.matmul(p.get("a")?, p.get("b")?)?;
        let y = g.tanh(y)?;
        // O(1) gradients, so a 10% error is visible through max(1, |a|)
        let w = g.constant(Tensor::randn(&[3, 2], 4.0, &mut ChaCha8Rng::seed_from_u64(9)))?;
        let y = g.mul(y, w)?;
        g.sum(y)
    };
    let (_, mut grads) = forward_backward(&params, &loss).unwrap();
    assert!(compare_gradients(&loss, &params, &grads, EPS).unwrap() < TOL);
    grads.get_mut("b").unwrap().data_mut().iter_mut().for_each(|v| *v *= 1.1);
    assert!(compare_gradients(&loss, &params, &grads, EPS).unwrap() > 5e-2);
}

#[test]
fn step_outside_range_is_rejected() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::from_vec(vec![1.0])).unwrap();
    let loss = |g: &mut Graph, p: &ParamVars| g.sum(p.get("w")?);
    assert!(finite_diff_check(&loss, &params, 0.05).is_err());
    assert!(finite_diff_check(&loss, &params, 0.0).is_err());
}
