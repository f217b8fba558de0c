//! Objective, bank and generator checks against independent oracles.

use genco_core::genco::{
    genco_loss, loss_from_similarities, moco_loss, sample_noise, Generator, LossOptions, MemoryBank, NoiseSpec,
};
use genco_core::numcore::{grad_check, Bound, Graph, ParamStore, Precision, SeedKey, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of the objective for one row, no log-sum-exp tricks.
fn scalar_oracle(negatives: &[f64], positives: &[f64], tau: f64) -> f64 {
    let num: f64 = positives.iter().map(|s| (s / tau).exp()).sum();
    let den: f64 = negatives.iter().map(|s| (s / tau).exp()).sum::<f64>() + num;
    -(num / den).ln()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn rows(rs: &[Vec<f64>]) -> Tensor {
    Tensor::new([rs.len(), rs[0].len()], rs.concat()).unwrap()
}

fn bank_of(rs: &[Vec<f64>], dim: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(rs.len().max(1), dim).unwrap();
    if !rs.is_empty() {
        bank.enqueue(&rows(rs)).unwrap();
    }
    bank
}

fn eval_genco(q: &[f64], qp: &[f64], k: &[f64], bank: &MemoryBank, tau: f64) -> f64 {
    let d = q.len();
    let mut g = Graph::new(Precision::F64);
    let q = g.constant(Tensor::new([1, d], q.to_vec()).unwrap());
    let qp = g.constant(Tensor::new([1, d], qp.to_vec()).unwrap());
    let k = g.constant(Tensor::new([1, d], k.to_vec()).unwrap());
    let l = genco_loss(&mut g, q, qp, k, bank, LossOptions::new(tau)).unwrap();
    g.value(l).item()
}

fn eval_similarities(neg: &[f64], pos: &[f64], tau: f64) -> f64 {
    let mut g = Graph::new(Precision::F64);
    let negv = (!neg.is_empty()).then(|| g.constant(Tensor::new([1, neg.len()], neg.to_vec()).unwrap()));
    let posv = g.constant(Tensor::new([1, pos.len()], pos.to_vec()).unwrap());
    let l = loss_from_similarities(&mut g, negv, posv, tau).unwrap();
    g.value(l).item()
}

#[test]
fn hand_value_single_negative() {
    // q·k = 1, q′·k = 0.5, q·k⁻ = 0 at τ = 1.
    let q = [1.0, 0.0];
    let k = [1.0, 0.0];
    let qp = [0.5, 0.75f64.sqrt()];
    let bank = bank_of(&[vec![0.0, 1.0]], 2);
    let got = eval_genco(&q, &qp, &k, &bank, 1.0);
    let want = scalar_oracle(&[0.0], &[1.0, 0.5], 1.0);
    assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    assert!((want - 0.2062).abs() < 5e-5);

    // raising the negative similarity to 0.5 must increase the loss
    let bank2 = bank_of(&[vec![0.5, 0.75f64.sqrt()]], 2);
    let raised = eval_genco(&q, &qp, &k, &bank2, 1.0);
    assert!((raised - scalar_oracle(&[0.5], &[1.0, 0.5], 1.0)).abs() <= 1e-9);
    assert!(raised > got);
}

#[test]
fn moco_hand_value_and_comparison() {
    let q = [1.0, 0.0];
    let bank = bank_of(&[vec![0.0, 1.0]], 2);
    let mut g = Graph::new(Precision::F64);
    let qv = g.constant(Tensor::new([1, 2], q.to_vec()).unwrap());
    let kv = g.constant(Tensor::new([1, 2], q.to_vec()).unwrap());
    let l = moco_loss(&mut g, qv, kv, &bank, 1.0).unwrap();
    let moco = g.value(l).item();
    assert!((moco - scalar_oracle(&[0.0], &[1.0], 1.0)).abs() <= 1e-9);
    assert!((moco - 0.3133).abs() < 5e-5);

    // q′ = q counts the positive twice and can only lower the loss.
    let genco = eval_genco(&q, &q, &q, &bank, 1.0);
    assert!((genco - scalar_oracle(&[0.0], &[1.0, 1.0], 1.0)).abs() <= 1e-9);
    assert!(genco <= moco);
}

#[test]
fn empty_bank_gives_exactly_zero() {
    let mut rng = SeedKey::root(3).rng();
    let bank = MemoryBank::new(8, 5).unwrap();
    for _ in 0..20 {
        let (q, qp, k) = (unit(&mut rng, 5), unit(&mut rng, 5), unit(&mut rng, 5));
        assert_eq!(eval_genco(&q, &qp, &k, &bank, 0.2), 0.0);
    }
    let mut g = Graph::new(Precision::F64);
    let q = g.constant(Tensor::new([1, 5], unit(&mut rng, 5)).unwrap());
    let k = g.constant(Tensor::new([1, 5], unit(&mut rng, 5)).unwrap());
    let l = moco_loss(&mut g, q, k, &bank, 0.2).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn invalid_batch_or_temperature_is_rejected() {
    let bank = MemoryBank::new(2, 3).unwrap();
    let mut g = Graph::new(Precision::F64);
    let e = g.constant(Tensor::zeros([0, 3]));
    assert!(genco_loss(&mut g, e, e, e, &bank, LossOptions::new(0.2)).is_err());
    let q = g.constant(Tensor::new([1, 3], vec![1.0, 0.0, 0.0]).unwrap());
    assert!(genco_loss(&mut g, q, q, q, &bank, LossOptions::new(0.0)).is_err());
    assert!(genco_loss(&mut g, q, q, q, &bank, LossOptions::new(-1.0)).is_err());
}

#[test]
fn loss_invariants_over_random_instances() {
    let mut rng = SeedKey::root(2024).rng();
    for case in 0..1000 {
        let dim = rng.gen_range(2..10);
        let n = rng.gen_range(0..17);
        let tau = rng.gen_range(0.1..1.0);
        let q = unit(&mut rng, dim);
        let qp = unit(&mut rng, dim);
        let k = unit(&mut rng, dim);
        let negs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, dim)).collect();
        let bank = bank_of(&negs, dim);
        let loss = eval_genco(&q, &qp, &k, &bank, tau);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let sims: Vec<f64> = negs.iter().map(|r| dot(&q, r)).collect();
        let pos = [dot(&q, &k), dot(&qp, &k)];
        let want = scalar_oracle(&sims, &pos, tau);
        assert!((loss - want).abs() < 1e-9, "case {case}: {loss} vs {want}");
        assert!(loss >= 0.0);
        assert_eq!(loss == 0.0, n == 0, "case {case}: loss {loss} with {n} negatives");

        // strict monotonicity in every similarity, probed on the similarity path
        let base = eval_similarities(&sims, &pos, tau);
        let delta = 1e-3;
        for j in 0..n {
            let mut up = sims.clone();
            up[j] += delta;
            assert!(eval_similarities(&up, &pos, tau) > base, "case {case}: negative {j}");
        }
        if n > 0 {
            for j in 0..2 {
                let mut up = pos;
                up[j] += delta;
                assert!(eval_similarities(&sims, &up, tau) < base, "case {case}: positive {j}");
            }
        }
    }
}

#[test]
fn bank_permutation_leaves_loss_bitwise_unchanged() {
    let mut rng = SeedKey::root(77).rng();
    for _ in 0..50 {
        let dim = 8;
        let negs: Vec<Vec<f64>> = (0..16).map(|_| unit(&mut rng, dim)).collect();
        let mut shuffled = negs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let (q, qp, k) = (unit(&mut rng, dim), unit(&mut rng, dim), unit(&mut rng, dim));
        let a = eval_genco(&q, &qp, &k, &bank_of(&negs, dim), 0.2);
        let b = eval_genco(&q, &qp, &k, &bank_of(&shuffled, dim), 0.2);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn gradient_oracle_through_generator() {
    let (dim, noise_dim, batch, bank_size) = (8, 8, 4, 16);
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let key = SeedKey::root(inst).derive("gradcheck");
        let mut rng = key.rng();
        let mut store = ParamStore::new();
        let gen = Generator::register(&mut store, dim, noise_dim, key.derive("g")).unwrap();
        let negs: Vec<Vec<f64>> = (0..bank_size).map(|_| unit(&mut rng, dim)).collect();
        let bank = bank_of(&negs, dim);
        let keys = rows(&(0..batch).map(|_| unit(&mut rng, dim)).collect::<Vec<_>>());
        let z = sample_noise(&NoiseSpec { dim: noise_dim, ..NoiseSpec::default() }, batch, key.derive("z"));
        let q = Tensor::from_fn([batch, dim], |_| rng.gen_range(-1.0..1.0));
        let mut inputs = vec![q];
        inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
        let err = grad_check(&inputs, 1e-6, |g, v| {
            let params = Bound::from_vars(v[1..].to_vec());
            let q = g.l2_normalize(v[0])?;
            let zv = g.constant(z.clone());
            let qp = gen.generate(g, &params, q, zv)?;
            let k = g.constant(keys.clone());
            genco_loss(g, q, qp, k, &bank, LossOptions::new(0.2))
        })
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn symmetric_negatives_add_generated_terms() {
    let q = vec![1.0, 0.0];
    let qp = vec![0.6, 0.8];
    let bank = bank_of(&[vec![0.0, 1.0]], 2);
    let mut g = Graph::new(Precision::F64);
    let qv = g.constant(Tensor::new([1, 2], q.clone()).unwrap());
    let qpv = g.constant(Tensor::new([1, 2], qp.clone()).unwrap());
    let l = genco_loss(
        &mut g,
        qv,
        qpv,
        qv,
        &bank,
        LossOptions {
            tau: 1.0,
            symmetric_negatives: true,
        },
    )
    .unwrap();
    let want = scalar_oracle(&[0.0, 0.8], &[1.0, 0.6], 1.0);
    assert!((g.value(l).item() - want).abs() < 1e-12);
}

#[test]
fn fifo_matches_shadow_model() {
    let mut rng = SeedKey::root(5).derive("fifo").rng();
    let (capacity, dim) = (37, 3);
    let mut bank = MemoryBank::new(capacity, dim).unwrap();
    let mut shadow: Vec<Vec<f64>> = Vec::new();
    for step in 0..1000 {
        let b = rng.gen_range(1..=capacity);
        let batch: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, dim)).collect();
        bank.enqueue(&rows(&batch)).unwrap();
        shadow.extend(batch);
        let keep = shadow.len().saturating_sub(capacity);
        let expected = &shadow[keep..];
        assert_eq!(bank.fill_count(), expected.len(), "step {step}");
        assert_eq!(bank.keys_in_arrival_order(), expected, "step {step}");
        if shadow.len() > 4 * capacity {
            shadow.drain(..shadow.len() - capacity);
        }
    }
}

proptest! {
    #[test]
    fn fill_count_saturates(batches in proptest::collection::vec(1usize..6, 1..40)) {
        let mut bank = MemoryBank::new(10, 2).unwrap();
        let mut total = 0;
        for b in batches {
            bank.enqueue(&Tensor::new([b, 2], [1.0, 0.0].repeat(b)).unwrap()).unwrap();
            total += b;
            prop_assert_eq!(bank.fill_count(), total.min(10));
            prop_assert_eq!(bank.write_pointer(), total % 10);
        }
    }
}
