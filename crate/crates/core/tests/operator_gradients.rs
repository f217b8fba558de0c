//! Every differentiable operator, composed with a random linear readout,
//! must agree with central finite differences in 64-bit mode.

use genco_core::numcore::{grad_check, Graph, SeedKey, Tensor, Var};
use genco_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 50;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = SeedKey::root(seed).derive("readout").rng();
    let r = randn(&mut rng, g.shape(out));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

fn check(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = SeedKey::root(seed).derive(name).rng();
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        let err = grad_check(&inputs, EPS, |g, v| {
            let out = f(g, v)?;
            readout(g, out, seed)
        })
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_family() {
    check("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1]));
    check("matmul_bt", &[&[3, 4], &[5, 4]], |g, v| g.matmul_bt(v[0], v[1]));
    check("linear", &[&[3, 4], &[2, 4], &[2]], |g, v| g.linear(v[0], v[1], v[2]));
    check("row_dot", &[&[3, 4], &[3, 4]], |g, v| g.row_dot(v[0], v[1]));
}

#[test]
fn convolutions() {
    check("conv_s1", &[&[2, 2, 5, 4], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 1, 1));
    check("conv_s2", &[&[2, 2, 6, 5], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1));
    check("conv_1x1", &[&[2, 3, 3, 3], &[2, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], 1, 0));
    check("deconv", &[&[2, 3, 2, 3], &[3, 2, 2, 2]], |g, v| g.conv_transpose2d(v[0], v[1], 2));
    check("channel_bias", &[&[2, 3, 2, 2], &[3]], |g, v| g.add_channel_bias(v[0], v[1]));
    check("broadcast_add", &[&[2, 3, 2, 2], &[2, 3]], |g, v| g.add_broadcast_channels(v[0], v[1]));
}

#[test]
fn normalization_and_pooling() {
    check("bn_train", &[&[3, 2, 3, 3], &[2], &[2]], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], None)?.0)
    });
    check("bn_train_2d", &[&[5, 3], &[3], &[3]], |g, v| Ok(g.batch_norm(v[0], v[1], v[2], None)?.0));
    check("bn_eval", &[&[3, 2, 3, 3], &[2], &[2]], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 1.5])))?.0)
    });
    check("relu", &[&[4, 5]], |g, v| Ok(g.relu(v[0])));
    check("max_pool2", &[&[2, 2, 4, 4]], |g, v| g.max_pool2(v[0]));
    check("gap", &[&[2, 3, 3, 2]], |g, v| g.global_avg_pool(v[0]));
}

#[test]
fn shape_and_reduction_ops() {
    check("concat0", &[&[2, 3], &[4, 3]], |g, v| g.concat(&[v[0], v[1]], 0));
    check("concat1", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |g, v| g.concat(&[v[0], v[1]], 1));
    check("l2_normalize", &[&[3, 5]], |g, v| g.l2_normalize(v[0]));
    check("log_sum_exp", &[&[3, 6]], |g, v| g.log_sum_exp(v[0]));
    check("mean_all", &[&[3, 2]], |g, v| g.mean_all(v[0]));
    check("sub_scale", &[&[3, 2], &[3, 2]], |g, v| {
        let d = g.sub(v[0], v[1])?;
        Ok(g.scale(d, -2.5))
    });
}

#[test]
fn cross_entropy_with_ignored_positions() {
    let labels = [0u32, 2, 255, 1, 1, 255];
    check("ce_dense", &[&[2, 3, 3]], |g, v| g.softmax_cross_entropy(v[0], &labels, 255));
    check("ce_rows", &[&[4, 3]], |g, v| g.softmax_cross_entropy(v[0], &[2, 0, 1, 2], 255));
}

#[test]
fn operators_are_bitwise_deterministic() {
    let run = || {
        let mut rng = SeedKey::root(9).rng();
        let mut g = Graph::new(genco_core::numcore::Precision::F32);
        let x = g.leaf(randn(&mut rng, &[2, 3, 8, 8]), true);
        let w = g.leaf(randn(&mut rng, &[4, 3, 3, 3]), true);
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let gam = g.constant(Tensor::full([4], 1.0));
        let bet = g.constant(Tensor::zeros([4]));
        let (y, _) = g.batch_norm(y, gam, bet, None).unwrap();
        let y = g.relu(y);
        let p = g.global_avg_pool(y).unwrap();
        let p = g.l2_normalize(p).unwrap();
        let l = g.log_sum_exp(p).unwrap();
        let s = g.mean_all(l).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).clone(), grads.get(w).unwrap().clone(), grads.get(x).unwrap().clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
