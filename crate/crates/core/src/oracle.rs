//! Finite-difference gradient oracles over the differentiable pieces of the
//! pipeline, all on 64-bit tapes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::Result;
use crate::fewshot::SegDecoder;
use crate::genco::{genco_loss, moco_loss, sample_noise, Generator, LossOptions, MemoryBank, NoiseSpec};
use crate::nn::Mode;
use crate::numcore::{grad_check, Bound, ParamStore, SeedKey, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn result(suite: &str, instances: usize, worst: f64) -> SuiteResult {
    SuiteResult {
        suite: suite.to_string(),
        instances,
        max_rel_error: worst,
        tolerance: TOLERANCE,
        passed: worst <= TOLERANCE,
    }
}

fn unit_rows(rng: &mut impl Rng, n: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.into_iter().map(|x| x / norm));
    }
    Tensor::new([n, dim], data).expect("consistent shape")
}

fn full_bank(rng: &mut impl Rng, size: usize, dim: usize) -> Result<MemoryBank> {
    let mut bank = MemoryBank::new(size, dim)?;
    bank.enqueue(&unit_rows(rng, size, dim))?;
    Ok(bank)
}

fn with_params(store: &ParamStore, first: Tensor) -> Vec<Tensor> {
    let mut inputs = vec![first];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    inputs
}

/// Contrastive objective with the generated positive, differentiated with
/// respect to the raw query and every generator weight.
pub fn genco_loss_suite(instances: usize, symmetric: bool) -> Result<SuiteResult> {
    let (dim, noise_dim, batch, bank_size) = (8, 8, 4, 16);
    let mut worst: f64 = 0.0;
    for inst in 0..instances as u64 {
        let key = SeedKey::root(inst).derive("gradcheck");
        let mut rng = key.rng();
        let mut store = ParamStore::new();
        let gen = Generator::register(&mut store, dim, noise_dim, key.derive("generator"))?;
        let bank = full_bank(&mut rng, bank_size, dim)?;
        let keys = unit_rows(&mut rng, batch, dim);
        let noise = NoiseSpec {
            dim: noise_dim,
            ..NoiseSpec::default()
        };
        let z = sample_noise(&noise, batch, key.derive("noise"));
        let q = Tensor::from_fn([batch, dim], |_| rng.gen_range(-1.0..1.0));
        let opts = LossOptions {
            tau: 0.2,
            symmetric_negatives: symmetric,
        };
        let err = grad_check(&with_params(&store, q), EPSILON, |g, v| {
            let params = Bound::from_vars(v[1..].to_vec());
            let q = g.l2_normalize(v[0])?;
            let z = g.constant(z.clone());
            let q_prime = gen.generate(g, &params, q, z)?;
            let k = g.constant(keys.clone());
            genco_loss(g, q, q_prime, k, &bank, opts)
        })?;
        worst = worst.max(err);
    }
    let name = if symmetric { "genco_loss_symmetric" } else { "genco_loss" };
    Ok(result(name, instances, worst))
}

pub fn moco_loss_suite(instances: usize) -> Result<SuiteResult> {
    let (dim, batch, bank_size) = (8, 4, 16);
    let mut worst: f64 = 0.0;
    for inst in 0..instances as u64 {
        let mut rng = SeedKey::root(inst).derive("gradcheck-moco").rng();
        let bank = full_bank(&mut rng, bank_size, dim)?;
        let keys = unit_rows(&mut rng, batch, dim);
        let q = Tensor::from_fn([batch, dim], |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(&[q], EPSILON, |g, v| {
            let q = g.l2_normalize(v[0])?;
            let k = g.constant(keys.clone());
            moco_loss(g, q, k, &bank, 0.2)
        })?;
        worst = worst.max(err);
    }
    Ok(result("moco_loss", instances, worst))
}

/// Encoder and projection head in training mode, so batch statistics are
/// part of the differentiated function.
pub fn encoder_suite(instances: usize) -> Result<SuiteResult> {
    let cfg = EncoderConfig {
        in_channels: 3,
        stage_widths: vec![2, 4],
        blocks_per_stage: 1,
        feature_dim: 4,
        projection_dim: 3,
    };
    let mut worst: f64 = 0.0;
    for inst in 0..instances as u64 {
        let key = SeedKey::root(inst).derive("gradcheck-encoder");
        let mut store = ParamStore::new();
        let model = EncoderModel::register(&cfg, &mut store, key.derive("init"))?;
        let mut rng = key.rng();
        let x = Tensor::from_fn([3, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let target = unit_rows(&mut rng, 3, 3);
        let err = grad_check(&with_params(&store, x), EPSILON, |g, v| {
            let params = Bound::from_vars(v[1..].to_vec());
            let mut updates = Vec::new();
            let y = model.forward_projection(g, &params, v[0], Mode::Train, &mut updates)?;
            let t = g.constant(target.clone());
            let dots = g.row_dot(y, t)?;
            g.mean_all(dots)
        })?;
        worst = worst.max(err);
    }
    Ok(result("encoder", instances, worst))
}

/// Segmentation decoder with per-pixel cross-entropy, including ignored
/// pixels.
pub fn decoder_suite(instances: usize) -> Result<SuiteResult> {
    let widths = [3, 2, 2, 2, 2];
    let mut worst: f64 = 0.0;
    for inst in 0..instances as u64 {
        let key = SeedKey::root(inst).derive("gradcheck-decoder");
        let mut store = ParamStore::new();
        let decoder = SegDecoder::register(&mut store, 4, &widths, 3, key.derive("init"))?;
        let mut rng = key.rng();
        let bottleneck = Tensor::from_fn([2, 4, 1, 1], |_| rng.gen_range(-1.0..1.0));
        let skips: Vec<Tensor> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let side = 2usize << i;
                Tensor::from_fn([2, w, side, side], |_| rng.gen_range(-1.0..1.0))
            })
            .collect();
        let labels: Vec<u32> = (0..2 * 32 * 32)
            .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..3) })
            .collect();
        let err = grad_check(&with_params(&store, bottleneck), EPSILON, |g, v| {
            let params = Bound::from_vars(v[1..].to_vec());
            let skip_vars: Vec<_> = skips.iter().map(|s| g.constant(s.clone())).collect();
            let logits = decoder.forward(g, &params, v[0], &skip_vars)?;
            g.softmax_cross_entropy(logits, &labels, 255)
        })?;
        worst = worst.max(err);
    }
    Ok(result("decoder", instances, worst))
}

/// Every suite at its standard instance count.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![
        genco_loss_suite(20, false)?,
        genco_loss_suite(20, true)?,
        moco_loss_suite(20)?,
        encoder_suite(3)?,
        decoder_suite(2)?,
    ])
}
